"""N-player Nash system: grid solver, Riccati oracle and closed-loop SDEs.

The grid solver handles ``d = 1`` and stores only ``u^{N,1}`` on the tensor
grid ``[-R, R]^N`` (axis ``k`` is player ``k``, 0-based). The other value
functions follow from exchangeability: ``u^{N,i}`` is ``u^{N,1}`` with axes
``0`` and ``i`` swapped.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import FixedPointFailure, NoConvergence, NonLqModel, StabilityViolation
from .fixedpoint import others_index, solve_aN
from .model import LqModel
from .utils import omega

__all__ = [
    "Grid",
    "ValueField",
    "RiccatiSolution",
    "TrajectoryBatch",
    "solve_nash_grid",
    "solve_nash_riccati",
    "derivative_decay_report",
    "simulate_closed_loop",
    "offdiag_energy_norm",
    "nash_residual",
    "save_field",
    "load_field",
    "MEMORY_BUDGET",
]

MEMORY_BUDGET = 10**7
CFL_SAFETY = 1.1


# ----------------------------------------------------------------------------
# grid and finite differences
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Grid:
    """Tensor grid ``[-R, R]`` per player with ``n`` nodes, and a time step.

    ``n`` must be odd (so 0 is a node) and at least 9.
    """

    radius: float
    points_per_axis: int
    dt: float
    t_steps: int

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        n = self.points_per_axis
        if n < 9 or n % 2 == 0:
            raise ValueError("points_per_axis must be odd and at least 9")
        if self.dt <= 0 or self.t_steps < 1:
            raise ValueError("need dt > 0 and t_steps >= 1")

    @property
    def h(self):
        return 2.0 * self.radius / (self.points_per_axis - 1)

    @property
    def horizon(self):
        return self.dt * self.t_steps

    @property
    def nodes(self):
        return np.linspace(-self.radius, self.radius, self.points_per_axis)

    def max_dt(self, N, sigma0, d=1, safety=CFL_SAFETY):
        """Largest step allowed by the explicit-scheme bound."""
        return self.h**2 / (2.0 * d * N * (1.0 + sigma0) * safety)

    def check_cfl(self, N, sigma0, d=1):
        limit = self.max_dt(N, sigma0, d)
        if self.dt > limit * (1 + 1e-12):
            raise StabilityViolation(f"dt={self.dt:.3e} exceeds the stability bound {limit:.3e}")

    @classmethod
    def for_problem(cls, radius, points_per_axis, horizon, N, sigma0=0.0, d=1, dt=None):
        """Grid whose ``dt`` divides ``horizon`` and respects the stability bound.

        When ``dt`` is given it is only adjusted downward to divide the horizon.
        """
        h = 2.0 * radius / (points_per_axis - 1)
        limit = h**2 / (2.0 * d * N * (1.0 + sigma0) * CFL_SAFETY)
        target = limit if dt is None else dt
        steps = max(1, math.ceil(horizon / target - 1e-9))
        return cls(radius, points_per_axis, horizon / steps, steps)


def _d1(u, h, axis):
    return np.gradient(u, h, axis=axis, edge_order=2)


def _d2(u, h, axis):
    """Second difference; the two boundary layers are linearly extrapolated."""
    u = np.moveaxis(u, axis, 0)
    out = np.empty_like(u)
    out[1:-1] = (u[2:] - 2.0 * u[1:-1] + u[:-2]) / h**2
    out[0] = 2.0 * out[1] - out[2]
    out[-1] = 2.0 * out[-2] - out[-3]
    return np.moveaxis(out, 0, axis)


def _dmixed(u, h, j, k):
    if j == k:
        return _d2(u, h, j)
    return _d1(_d1(u, h, j), h, k)


def _node_points(grid, N):
    z = grid.nodes
    mesh = np.meshgrid(*([z] * N), indexing="ij")
    return np.stack(mesh, axis=-1)[..., None]  # (n,)*N + (N, 1)


def _diag_gradient(u, h):
    """``(D_1u^1, ..., D_Nu^N)`` on the grid, shape ``(n,)*N + (N,)``."""
    N = u.ndim
    g1 = _d1(u, h, 0)
    return np.stack([g1] + [np.swapaxes(g1, 0, j) for j in range(1, N)], axis=-1)


# ----------------------------------------------------------------------------
# value field
# ----------------------------------------------------------------------------


@dataclass
class ValueField:
    """Time-indexed ``u^{N,1}`` on a tensor grid.

    Attributes
    ----------
    N : int
    grid : Grid
    times : ndarray, shape (S,)
        Stored slice times, ascending, last equal to the horizon.
    values : ndarray, shape (S, n, ..., n)
    model : Model or None
    """

    N: int
    grid: Grid
    times: np.ndarray
    values: np.ndarray
    model: object = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def d(self):
        return 1

    def slice_index(self, t):
        """Index of the stored slice nearest to ``t``."""
        return int(np.argmin(np.abs(self.times - t)))

    def _interp(self, key, s, array_fn):
        ck = (key, s)
        if ck not in self._cache:
            z = self.grid.nodes
            self._cache[ck] = RegularGridInterpolator([z] * self.N, array_fn(self.values[s]), method="linear")
        return self._cache[ck]

    def _time_blend(self, t, key, array_fn, pts):
        """Linear interpolation in time between the bracketing stored slices."""
        t = float(np.clip(t, self.times[0], self.times[-1]))
        hi = int(np.searchsorted(self.times, t))
        hi = min(max(hi, 1), self.times.size - 1) if self.times.size > 1 else 0
        if self.times.size == 1:
            return self._interp(key, 0, array_fn)(pts)
        lo = hi - 1
        w = (t - self.times[lo]) / (self.times[hi] - self.times[lo])
        a = self._interp(key, lo, array_fn)(pts)
        b = self._interp(key, hi, array_fn)(pts)
        return (1 - w) * a + w * b

    def _flat_points(self, X):
        X = np.asarray(X, float)
        if X.shape[-1] == 1 and X.ndim >= 2 and X.shape[-2] == self.N:
            X = X[..., 0]
        R = self.grid.radius
        clipped = np.clip(X, -R, R)
        return X.shape[:-1], clipped.reshape(-1, self.N)

    def value(self, t, X):
        """Multilinear interpolation of ``u^{N,1}(t, X)``; ``X`` has shape ``(..., N[, 1])``."""
        lead, pts = self._flat_points(X)
        return self._time_blend(t, "u", lambda a: a, pts).reshape(lead)

    def gradient(self, t, X):
        """Interpolated full gradient ``(D_1u^1, ..., D_Nu^1)``, shape ``(..., N, 1)``."""
        lead, pts = self._flat_points(X)
        h = self.grid.h
        comps = [self._time_blend(t, ("g", k), lambda a, k=k: _d1(a, h, k), pts) for k in range(self.N)]
        return np.stack(comps, axis=-1).reshape(lead + (self.N, 1))

    def diag_gradient(self, t, X):
        """Interpolated ``(D_1u^1, ..., D_Nu^N)`` at ``X``, shape ``(..., N, 1)``."""
        lead, pts = self._flat_points(X)
        h = self.grid.h
        g1 = lambda a: _d1(a, h, 0)  # noqa: E731
        out = np.empty(pts.shape)
        for j in range(self.N):
            swapped = pts.copy()
            swapped[:, [0, j]] = swapped[:, [j, 0]]
            out[:, j] = self._time_blend(t, ("g", 0), g1, swapped)
        return out.reshape(lead + (self.N, 1))

    def node_derivative(self, s, axes):
        """Grid derivative of slice ``s`` along the given axes (1 or 2 entries)."""
        h = self.grid.h
        u = self.values[s]
        if len(axes) == 1:
            return _d1(u, h, axes[0])
        if len(axes) == 2:
            return _dmixed(u, h, axes[0], axes[1])
        raise ValueError("only first and second derivatives are supported")

    def inner_mask(self, fraction=0.5):
        """Boolean mask of nodes with every coordinate in ``[-fraction R, fraction R]``."""
        z = self.grid.nodes
        inside = np.abs(z) <= fraction * self.grid.radius + 1e-12
        mask = inside
        for _ in range(self.N - 1):
            mask = np.multiply.outer(mask, inside)
        return mask.astype(bool)


# ----------------------------------------------------------------------------
# grid solver
# ----------------------------------------------------------------------------


def _terminal_slice(model, N, grid):
    X = _node_points(grid, N)
    idx = others_index(N)[0]
    return model.G(X[..., 0, :], X[..., idx, :])


def _solve_actions(model, X, P, a0, tol):
    try:
        return solve_aN(model, X, P, tol=tol, method="newton", a0=a0, max_iter=100).actions
    except NoConvergence:
        pass
    # locate the worst node for the error message
    flat_x = X.reshape(-1, *X.shape[-2:])
    flat_p = P.reshape(-1, *P.shape[-2:])
    worst, worst_res = None, -1.0
    for k in range(flat_x.shape[0]):
        try:
            r = solve_aN(model, flat_x[k], flat_p[k], tol=tol, max_iter=10000).residual
        except NoConvergence as exc:
            r = exc.residual if np.isfinite(exc.residual) else np.inf
            if r > worst_res:
                worst, worst_res = flat_x[k, :, 0].tolist(), r
    raise FixedPointFailure(f"action fixed point failed at grid node {worst}", node=worst)


def _nash_rhs(model, u, h, X, a_prev, sigma0, tol):
    """Right side ``sum Lap u + sigma0 sum D_jk u - hatH + sum_{j>1} a^j D_j u``."""
    N = u.ndim
    P = _diag_gradient(u, h)[..., None]
    a = _solve_actions(model, X, P, a_prev, tol)
    idx = others_index(N)[0]
    hatH = model.H(X[..., 0, :], P[..., 0, :], X[..., idx, :], a[..., idx, :])
    out = -hatH
    for j in range(N):
        out = out + (1.0 + sigma0) * _d2(u, h, j)
        if j > 0:
            out = out + a[..., j, 0] * _d1(u, h, j)
    if sigma0 > 0:
        for j in range(N):
            for k in range(N):
                if j != k:
                    out = out + sigma0 * _dmixed(u, h, j, k)
    return out, a


def solve_nash_grid(model, N, grid, save_every=None, tol=1e-11, memory_budget=MEMORY_BUDGET):
    """Explicit backward Euler for the Nash system, ``d = 1``.

    Parameters
    ----------
    model : Model
    N : int
        Number of players (at least 2).
    grid : Grid
        Must satisfy the stability bound for ``N`` and ``model.sigma0``.
    save_every : int, optional
        Store every k-th time slice (the terminal and initial slices are
        always stored). Default keeps the stored field under ~200 MB.

    Returns
    -------
    ValueField

    Raises
    ------
    StabilityViolation
        CFL breach, or a slice sup-norm growing more than tenfold in one step.
    FixedPointFailure
        The per-node action fixed point failed.
    """
    if model.dim != 1:
        raise ValueError("the grid solver supports d = 1 only")
    if N < 2:
        raise ValueError("need N >= 2")
    n = grid.points_per_axis
    if N * n**N > memory_budget:
        raise ValueError(f"N * n^N = {N * n**N} exceeds the memory budget {memory_budget}")
    if abs(grid.horizon - model.horizon) > 1e-9 * max(1.0, model.horizon):
        raise ValueError(f"grid horizon {grid.horizon} differs from model horizon {model.horizon}")
    grid.check_cfl(N, model.sigma0)
    if save_every is None:
        slice_bytes = 8 * n**N
        save_every = max(1, math.ceil((grid.t_steps + 1) * slice_bytes / 2e8))
    h = grid.h
    X = _node_points(grid, N)
    u = _terminal_slice(model, N, grid)
    stored_t = [grid.horizon]
    stored_u = [u.copy()]
    a_prev = None
    for step in range(grid.t_steps, 0, -1):
        rhs, a_prev = _nash_rhs(model, u, h, X, a_prev, model.sigma0, tol)
        new = u + grid.dt * rhs
        old_max = float(np.max(np.abs(u)))
        new_max = float(np.max(np.abs(new)))
        if not np.isfinite(new_max) or new_max > 10.0 * max(old_max, 1.0):
            raise StabilityViolation(f"slice sup-norm jumped from {old_max:.3e} to {new_max:.3e} at step {step}")
        u = new
        k = step - 1
        if k == 0 or k % save_every == 0:
            stored_t.append(k * grid.dt)
            stored_u.append(u.copy())
    times = np.array(stored_t[::-1])
    values = np.stack(stored_u[::-1])
    return ValueField(N, grid, times, values, model)


# ----------------------------------------------------------------------------
# Riccati oracle
# ----------------------------------------------------------------------------


def _selector(N, d, i):
    E = np.zeros((d, N * d))
    E[:, i * d:(i + 1) * d] = np.eye(d)
    return E


def _swap_perm(N, d, j):
    """Block permutation exchanging players 0 and ``j``."""
    order = list(range(N))
    order[0], order[j] = order[j], order[0]
    perm = np.zeros((N * d, N * d))
    for a, b in enumerate(order):
        perm[a * d:(a + 1) * d, b * d:(b + 1) * d] = np.eye(d)
    return perm


def _mean_field_weights(N, d, i, q):
    """``E_i - q/(N-1) sum_{j != i} E_j``."""
    W = _selector(N, d, i).copy()
    for j in range(N):
        if j != i:
            W -= q / (N - 1) * _selector(N, d, j)
    return W


class _RiccatiSystem:
    """Coefficient ODE of the quadratic ansatz for player 1."""

    def __init__(self, spec, N, sigma0):
        d = spec.dim
        self.N, self.d, self.sigma0 = N, d, sigma0
        nd = N * d
        J = np.kron(np.ones((N, N)), np.eye(d))
        Mmat = np.eye(nd) + spec.lam / (N - 1) * (J - np.eye(nd))
        self.A = np.linalg.inv(Mmat)
        self.perms = [np.eye(nd)] + [_swap_perm(N, d, j) for j in range(1, N)]
        self.E = [_selector(N, d, j) for j in range(N)]
        self.Pi = self.E[0].T @ self.E[0]
        Wx = _mean_field_weights(N, d, 0, spec.q_x)
        self.Rx = spec.c_x * Wx.T @ Wx
        Wg = _mean_field_weights(N, d, 0, spec.q_g)
        self.PT = spec.c_g * Wg.T @ Wg
        self.K = J

    def feedback(self, P1, q1):
        """``F, f`` with equilibrium actions ``a = -(F x + f)``."""
        S = np.vstack([self.E[j] @ pm @ P1 @ pm for j, pm in enumerate(self.perms)])
        s = np.concatenate([self.E[j] @ pm @ q1 for j, pm in enumerate(self.perms)])
        return self.A @ S, self.A @ s

    def rhs(self, P, q, r):
        F, f = self.feedback(P, q)
        Pi = self.Pi
        rest = np.eye(P.shape[0]) - Pi
        dP = F.T @ Pi @ F + F.T @ rest @ P + P @ rest @ F - self.Rx
        dP = 0.5 * (dP + dP.T)
        dq = F.T @ Pi @ f + F.T @ rest @ q + P @ rest @ f
        dr = -np.trace(P) - self.sigma0 * np.trace(P @ self.K) + 0.5 * f @ Pi @ f + f @ rest @ q
        return dP, dq, dr


@dataclass
class RiccatiSolution:
    """Quadratic solution ``u^{N,1}(t, x) = x^T P(t) x / 2 + q(t)^T x + r(t)``.

    Coefficients are stored on a uniform time grid together with their time
    derivatives; evaluation between nodes uses cubic Hermite interpolation.
    ``x`` is the flattened player vector of length ``N d``.
    """

    N: int
    d: int
    horizon: float
    times: np.ndarray
    P: np.ndarray
    q: np.ndarray
    r: np.ndarray
    dP: np.ndarray
    dq: np.ndarray
    dr: np.ndarray
    model: object = None
    system: object = field(default=None, repr=False)

    def _hermite(self, t, y, dy):
        t = float(np.clip(t, self.times[0], self.times[-1]))
        k = min(int(np.searchsorted(self.times, t, side="right")) - 1, self.times.size - 2)
        k = max(k, 0)
        t0, t1 = self.times[k], self.times[k + 1]
        hstep = t1 - t0
        s = (t - t0) / hstep
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return h00 * y[k] + h10 * hstep * dy[k] + h01 * y[k + 1] + h11 * hstep * dy[k + 1]

    def coefficients(self, t):
        """``(P_1, q_1, r_1)`` at time ``t``."""
        return (
            self._hermite(t, self.P, self.dP),
            self._hermite(t, self.q, self.dq),
            float(self._hermite(t, self.r, self.dr)),
        )

    def coefficient_rates(self, t):
        """Time derivatives from the ODE right side at the interpolated coefficients."""
        return self.system.rhs(*self.coefficients(t))

    def player_coefficients(self, t, i):
        """Coefficients of ``u^{N,i}`` obtained by exchanging players 1 and ``i``."""
        P, q, r = self.coefficients(t)
        pm = self.system.perms[i]
        return pm @ P @ pm, pm @ q, r

    @staticmethod
    def _flat(X, nd):
        X = np.asarray(X, float)
        return X.reshape(X.shape[:-2] + (nd,)) if X.ndim >= 2 and X.shape[-2:] != (nd,) else X

    def value(self, t, X, i=0):
        """``u^{N,i}(t, X)`` for ``X`` of shape ``(..., N, d)``."""
        P, q, r = self.player_coefficients(t, i)
        x = np.asarray(X, float).reshape(np.shape(X)[:-2] + (self.N * self.d,))
        return 0.5 * np.einsum("...a,ab,...b->...", x, P, x) + x @ q + r

    def gradient(self, t, X, i=0):
        """Full gradient of ``u^{N,i}`` at ``X``, shape ``(..., N, d)``."""
        P, q, _ = self.player_coefficients(t, i)
        x = np.asarray(X, float).reshape(np.shape(X)[:-2] + (self.N * self.d,))
        return (x @ P.T + q).reshape(np.shape(X))

    def hessian(self, t, i=0):
        """Constant-in-space Hessian of ``u^{N,i}``, shape ``(N d, N d)``."""
        return self.player_coefficients(t, i)[0]

    def diag_gradient(self, t, X):
        """``(D_1u^1, ..., D_Nu^N)`` at ``X``, shape ``(..., N, d)``."""
        P, q, _ = self.coefficients(t)
        x = np.asarray(X, float).reshape(np.shape(X)[:-2] + (self.N * self.d,))
        out = np.empty(np.shape(X))
        for j, pm in enumerate(self.system.perms):
            g = (x @ (pm @ P @ pm).T + pm @ q)
            out[..., j, :] = g[..., j * self.d:(j + 1) * self.d]
        return out

    def time_derivative(self, t, X):
        """``partial_t u^{N,1}`` from the coefficient ODE."""
        dP, dq, dr = self.coefficient_rates(t)
        x = np.asarray(X, float).reshape(np.shape(X)[:-2] + (self.N * self.d,))
        return 0.5 * np.einsum("...a,ab,...b->...", x, dP, x) + x @ dq + dr


def solve_nash_riccati(model, N, dt=1e-4):
    """Integrate the coefficient ODE of the quadratic ansatz backward with RK4.

    Only the coefficients of ``u^{N,1}`` are integrated; those of the other
    players follow by exchanging player blocks.

    Raises
    ------
    NonLqModel
        If ``model`` is not exactly the linear-quadratic family.
    """
    if type(model) is not LqModel:
        raise NonLqModel(f"Riccati oracle needs the lq family, got {type(model).__name__}")
    if N < 2:
        raise ValueError("need N >= 2")
    system = _RiccatiSystem(model.spec, N, model.sigma0)
    T = model.horizon
    steps = max(1, math.ceil(T / dt - 1e-9))
    step = T / steps
    nd = N * model.dim
    P = np.empty((steps + 1, nd, nd))
    q = np.empty((steps + 1, nd))
    r = np.empty(steps + 1)
    dP, dq, dr = np.empty_like(P), np.empty_like(q), np.empty_like(r)
    state = (system.PT.copy(), np.zeros(nd), 0.0)

    def f(s):
        return system.rhs(*s)

    def axpy(s, k, c):
        return (s[0] + c * k[0], s[1] + c * k[1], s[2] + c * k[2])

    for idx in range(steps, -1, -1):
        P[idx], q[idx], r[idx] = state
        dP[idx], dq[idx], dr[idx] = f(state)
        if idx == 0:
            break
        # backward in time: step -step
        k1 = f(state)
        k2 = f(axpy(state, k1, -step / 2))
        k3 = f(axpy(state, k2, -step / 2))
        k4 = f(axpy(state, k3, -step))
        state = tuple(
            state[m] - step / 6 * (k1[m] + 2 * k2[m] + 2 * k3[m] + k4[m]) for m in range(3)
        )
        state = (0.5 * (state[0] + state[0].T), state[1], float(state[2]))
    times = np.linspace(0.0, T, steps + 1)
    return RiccatiSolution(N, model.dim, T, times, P, q, r, dP, dq, dr, model, system)


def nash_residual(model, sol, t, X, i=0, sigma0=None):
    """Pointwise residual of the Nash system for player ``i`` using generic evaluators.

    ``sol`` must expose ``gradient``, ``hessian`` and ``time_derivative``
    (a :class:`RiccatiSolution`); the fixed point is solved with
    :func:`solve_aN` and ``H`` from the model, independently of the ODE.
    """
    sigma0 = model.sigma0 if sigma0 is None else sigma0
    X = np.asarray(X, float)
    N, d = X.shape[-2], X.shape[-1]
    if i != 0:
        raise ValueError("residual is evaluated for player 1 (i = 0)")
    Pdiag = sol.diag_gradient(t, X)
    a = solve_aN(model, X, Pdiag, tol=1e-14, method="newton").actions
    idx = others_index(N)[0]
    hatH = model.H(X[..., 0, :], Pdiag[..., 0, :], X[..., idx, :], a[..., idx, :])
    grad = sol.gradient(t, X)
    Hs = sol.hessian(t)
    lap = np.trace(Hs)
    common = np.sum(Hs.reshape(N, d, N, d).trace(axis1=1, axis2=3))
    transport = np.sum(a[..., 1:, :] * grad[..., 1:, :], axis=(-1, -2))
    return -sol.time_derivative(t, X) - lap - sigma0 * common + hatH - transport


# ----------------------------------------------------------------------------
# derivative decay
# ----------------------------------------------------------------------------


def _index_classes(N):
    """Representative index tuples (player 1 is index 0) per equality pattern."""
    classes = [("i=j", (0, 0))]
    classes.append(("i!=j", (0, 1)))
    classes.append(("i=j=k", (0, 0, 0)))
    classes.append(("i=j!=k", (0, 0, 1)))
    classes.append(("i!=j=k", (0, 1, 1)))
    if N >= 3:
        classes.append(("i,j,k distinct", (0, 1, 2)))
    return classes


def derivative_decay_report(field, probes=None, fraction=0.5):
    """Max-norm of grid derivatives of ``u^{N,1}`` per index class.

    Parameters
    ----------
    field : ValueField
    probes : sequence of tuples, optional
        Index tuples ``(i, j)`` or ``(i, j, k)`` with ``i = 0``; defaults to
        one representative per equality pattern. ``(0, j, k)`` measures
        ``D_{kj} u^{N,1}``.
    fraction : float
        Only nodes with all coordinates in ``[-fraction R, fraction R]`` count.

    Returns
    -------
    list of dict keyed by ``N, i, j, k, l, omega, norm, norm_over_omega``
    """
    N = field.N
    if probes is None:
        probes = [t for _, t in _index_classes(N)]
    mask = field.inner_mask(fraction)
    rows = []
    for t in probes:
        t = tuple(int(v) for v in t)
        if t[0] != 0:
            raise ValueError("probes are stated for player 1 (index 0); use symmetry for others")
        axes = t[1:]
        peak = 0.0
        for s in range(field.values.shape[0]):
            der = field.node_derivative(s, axes)
            peak = max(peak, float(np.max(np.abs(der[mask]))))
        w = omega(N, t)
        padded = list(t) + [None] * (4 - len(t))
        rows.append({"N": N, "i": padded[0], "j": padded[1], "k": padded[2], "l": padded[3],
                     "omega": w, "norm": peak, "norm_over_omega": peak / w})
    return rows


# ----------------------------------------------------------------------------
# closed-loop SDE
# ----------------------------------------------------------------------------


@dataclass
class TrajectoryBatch:
    """Simulated closed-loop paths.

    ``paths`` has shape ``(n_steps + 1, n_paths, N, d)``; ``exit_flags``
    counts path-steps whose position left ``[-R, R]`` and was clamped for
    the drift lookup.
    """

    times: np.ndarray
    paths: np.ndarray
    seed: int
    t0: float
    x0: np.ndarray
    exit_flags: int = 0


def _rng(seed):
    return np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))


def simulate_closed_loop(model, field, t0, x0, n_paths, n_steps, seed=0):
    """Euler-Maruyama for ``dX^i = a^{N,i}(t, X) dt + sqrt(2) dW^i + sqrt(2 sigma0) dW^0``.

    The drift solves the action fixed point at the interpolated
    ``(D_1u^1, ..., D_Nu^N)``. ``field`` may be a grid :class:`ValueField`
    (positions outside the grid are clamped for the lookup and counted) or
    a :class:`RiccatiSolution`.
    """
    x0 = np.asarray(x0, float)
    if x0.ndim == 1:
        x0 = x0[:, None]
    N, d = x0.shape
    T = model.horizon
    if not 0 <= t0 < T:
        raise ValueError("t0 must lie in [0, T)")
    radius = getattr(getattr(field, "grid", None), "radius", None)
    if radius is not None and np.any(np.abs(x0) > radius):
        raise ValueError("x0 lies outside the grid")
    rng = _rng(seed)
    dt = (T - t0) / n_steps
    times = t0 + dt * np.arange(n_steps + 1)
    paths = np.empty((n_steps + 1, n_paths, N, d))
    X = np.broadcast_to(x0, (n_paths, N, d)).copy()
    paths[0] = X
    flags = 0
    a_prev = None
    s0 = math.sqrt(2.0 * model.sigma0)
    for k in range(n_steps):
        t = times[k]
        look = X
        if radius is not None:
            outside = np.abs(X) > radius
            flags += int(np.count_nonzero(np.any(outside, axis=(-1, -2))))
            look = np.clip(X, -radius, radius)
        P = field.diag_gradient(t, look)
        a = solve_aN(model, look, P, tol=1e-12, method="newton", a0=a_prev).actions
        a_prev = a
        dW = rng.standard_normal((n_paths, N, d))
        dW0 = rng.standard_normal((n_paths, 1, d))
        X = X + a * dt + math.sqrt(2.0 * dt) * dW + s0 * math.sqrt(dt) * dW0
        paths[k + 1] = X
    return TrajectoryBatch(times, paths, int(seed), float(t0), x0, flags)


def offdiag_energy_norm(model, field, x0_list, t0=0.0, n_paths=2000, n_steps=50, seed=0):
    """Estimate of ``|| (sum_{j != 1} |D_j u^{N,1}|^2)^{1/2} ||_{L^2}`` along equilibrium paths.

    The supremum over initial conditions is replaced by a maximum over
    ``x0_list``; the time integral uses the left-point rule on the path grid.

    Returns
    -------
    float
        ``sqrt(max_x0 E int sum_{j != 1} |D_j u^{N,1}(t, X_t)|^2 dt)``.
    """
    best = 0.0
    for n, x0 in enumerate(x0_list):
        batch = simulate_closed_loop(model, field, t0, x0, n_paths, n_steps, seed + n)
        dt = batch.times[1] - batch.times[0]
        total = np.zeros(n_paths)
        radius = getattr(getattr(field, "grid", None), "radius", None)
        for k in range(n_steps):
            X = batch.paths[k]
            if radius is not None:
                X = np.clip(X, -radius, radius)
            g = field.gradient(batch.times[k], X)
            total += dt * np.sum(g[:, 1:, :] ** 2, axis=(-1, -2))
        best = max(best, float(np.mean(total)))
    return math.sqrt(best)


# ----------------------------------------------------------------------------
# serialization
# ----------------------------------------------------------------------------


def save_field(field, path):
    """Write header ``(N, d, n, R, dt, t_steps)``, then row-major float64 slices.

    Integers are little-endian int64 and reals little-endian float64. A
    JSON sidecar ``<path>.json`` records the stored slice times and model.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    g = field.grid
    header = struct.pack("<qqqddq", field.N, field.d, g.points_per_axis, g.radius, g.dt, g.t_steps)
    with path.open("wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())
    meta = {
        "times": [float(t) for t in field.times],
        "slices": int(field.values.shape[0]),
        "model": field.model.describe() if field.model is not None else None,
    }
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_field(path, model=None):
    """Inverse of :func:`save_field`."""
    path = Path(path)
    raw = path.read_bytes()
    size = struct.calcsize("<qqqddq")
    N, d, n, R, dt, steps = struct.unpack("<qqqddq", raw[:size])
    meta = json.loads(Path(str(path) + ".json").read_text())
    values = np.frombuffer(raw[size:], dtype="<f8").reshape((meta["slices"],) + (n,) * (N * d)).copy()
    return ValueField(N, Grid(R, n, dt, steps), np.array(meta["times"]), values, model)
