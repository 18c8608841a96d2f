"""Master-equation lift of Nash solutions, residuals and the mean-field limit.

The lift reads ``u^{N,1}(t, x)`` as a function ``U^N(t, x^1, m)`` of the
first player's state and the empirical measure ``m`` of the other ``N - 1``
states, with measure derivatives rescaled by ``N - 1`` and ``(N - 1)^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.special import ndtri

from .errors import NonLqModel, OutOfDomain, PicardStalled, WrongCloudSize
from .fixedpoint import solve_phi, _fixed_point
from .model import LqModel, StateActionCloud
from .nash import Grid, RiccatiSolution, ValueField, _d1, _d2

__all__ = [
    "MasterLift",
    "MasterLQ",
    "MfgcSolution",
    "lift",
    "master_residual",
    "me_residual",
    "solve_master_lq",
    "convergence_report",
    "quantile_cloud",
    "solve_mfgc_picard",
    "lq_moment_flow",
    "RESIDUAL_HEADER",
]

RESIDUAL_HEADER = ("N", "t", "probe_id", "residual", "envelope", "ratio")


def _as_cloud(cloud, d):
    arr = np.asarray(getattr(cloud, "x", cloud), dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None] if d == 1 else arr[None, :]
    return arr


def _as_point(x, d):
    return np.asarray(x, float).reshape(d)


# ----------------------------------------------------------------------------
# empirical lift
# ----------------------------------------------------------------------------


class MasterLift:
    """Evaluators ``U^N, U^N_t, U^N_x, U^N_xx, U^N_m, U^N_xm, U^N_ym, U^N_mm``.

    Parameters
    ----------
    source : ValueField or RiccatiSolution
        Grid solutions are read at grid nodes: states are snapped to the
        nearest node and times to the nearest stored slice. Riccati
        solutions are evaluated exactly.

    Notes
    -----
    Measure-derivative evaluators take an atom ``y`` (and ``z``) of the
    cloud. ``dmm`` is defined only for two distinct atoms; ``y == z`` is
    rejected.
    """

    def __init__(self, source):
        self.source = source
        self.N = source.N
        self.d = source.d
        self.is_grid = isinstance(source, ValueField)
        self.model = getattr(source, "model", None)
        self._der = {}

    # -- argument handling ----------------------------------------------------
    def _snap(self, arr):
        if not self.is_grid:
            return arr
        g = self.source.grid
        if np.any(np.abs(arr) > g.radius + 1e-9):
            raise OutOfDomain(f"point outside the grid [-{g.radius}, {g.radius}]")
        idx = np.rint((arr + g.radius) / g.h).astype(int)
        return g.nodes[idx]

    def assemble(self, x, cloud):
        """Player vector ``(x, cloud)`` of shape ``(N, d)`` (snapped on grids)."""
        c = _as_cloud(cloud, self.d)
        if c.shape[0] != self.N - 1:
            raise WrongCloudSize(f"cloud must have {self.N - 1} atoms, got {c.shape[0]}")
        X = np.vstack([_as_point(x, self.d)[None, :], c])
        return self._snap(X)

    def _atom(self, X, y):
        y = self._snap(_as_point(y, self.d)[None, :])[0]
        hits = np.flatnonzero(np.all(np.abs(X[1:] - y) <= 1e-12, axis=1))
        if hits.size == 0:
            raise ValueError("y is not an atom of the cloud")
        return int(hits[0]) + 1

    def _pair(self, X, y, z):
        j = self._atom(X, y)
        zz = self._snap(_as_point(z, self.d)[None, :])[0]
        hits = [k + 1 for k in np.flatnonzero(np.all(np.abs(X[1:] - zz) <= 1e-12, axis=1)) if k + 1 != j]
        if np.allclose(X[j], zz, atol=1e-12, rtol=0):
            raise ValueError("U_mm is only defined at distinct atoms (y != z)")
        if not hits:
            raise ValueError("z is not an atom of the cloud")
        return j, hits[0]

    # -- grid backend ---------------------------------------------------------
    def _node(self, X):
        g = self.source.grid
        return tuple(np.rint((X[:, 0] + g.radius) / g.h).astype(int))

    def _slice(self, t):
        return self.source.slice_index(t)

    def _grid_der(self, s, axes):
        key = (s, tuple(axes))
        if key not in self._der:
            self._der[key] = self.source.node_derivative(s, list(axes))
        return self._der[key]

    # -- raw derivatives of u^{N,1} -----------------------------------------
    def _u(self, t, X):
        if self.is_grid:
            return float(self.source.values[self._slice(t)][self._node(X)])
        return float(self.source.value(t, X))

    def _ut(self, t, X):
        if self.is_grid:
            series = self.source.values[(slice(None),) + self._node(X)]
            if series.size < 2:
                raise ValueError("time derivative needs at least two stored slices")
            return float(np.gradient(series, self.source.times)[self._slice(t)])
        return float(self.source.time_derivative(t, X))

    def _du(self, t, X, j):
        if self.is_grid:
            return np.array([self._grid_der(self._slice(t), (j,))[self._node(X)]])
        return self.source.gradient(t, X)[j]

    def _ddu(self, t, X, j, k):
        if self.is_grid:
            return np.array([[self._grid_der(self._slice(t), (j, k))[self._node(X)]]])
        d = self.d
        Hs = self.source.hessian(t)
        return Hs[j * d:(j + 1) * d, k * d:(k + 1) * d]

    # -- lifted evaluators ---------------------------------------------------------
    def value(self, t, x, cloud):
        return self._u(t, self.assemble(x, cloud))

    def t_deriv(self, t, x, cloud):
        return self._ut(t, self.assemble(x, cloud))

    def dx(self, t, x, cloud):
        return self._du(t, self.assemble(x, cloud), 0)

    def dxx(self, t, x, cloud):
        return self._ddu(t, self.assemble(x, cloud), 0, 0)

    def dm(self, t, x, cloud, y):
        X = self.assemble(x, cloud)
        return (self.N - 1) * self._du(t, X, self._atom(X, y))

    def dxm(self, t, x, cloud, y):
        X = self.assemble(x, cloud)
        return (self.N - 1) * self._ddu(t, X, 0, self._atom(X, y))

    def dym(self, t, x, cloud, y):
        X = self.assemble(x, cloud)
        j = self._atom(X, y)
        return (self.N - 1) * self._ddu(t, X, j, j)

    def dmm(self, t, x, cloud, y, z):
        X = self.assemble(x, cloud)
        j, k = self._pair(X, y, z)
        return (self.N - 1) ** 2 * self._ddu(t, X, j, k)

    # -- integrated pieces used by the residual ---------------------------------
    def operator_terms(self, t, x, cloud):
        """Trace terms at ``(t, x, m)``, indexing atoms by position in the cloud.

        Returns a dict with ``Ut, trUxx, int_trUym, int_trUxm, intint_trUmm``
        (off-diagonal average over ``n (n - 1)`` ordered pairs) and
        ``max_abs_Umm``.
        """
        X = self.assemble(x, cloud)
        n = self.N - 1
        sc = self.N - 1
        trym = np.mean([sc * np.trace(self._ddu(t, X, j, j)) for j in range(1, self.N)])
        trxm = np.mean([sc * np.trace(self._ddu(t, X, 0, j)) for j in range(1, self.N)])
        mm = [sc**2 * self._ddu(t, X, j, k) for j in range(1, self.N) for k in range(1, self.N) if j != k]
        trmm = float(np.mean([np.trace(b) for b in mm])) if mm else 0.0
        peak = float(max((np.max(np.abs(b)) for b in mm), default=0.0))
        return {
            "Ut": self._ut(t, X),
            "trUxx": float(np.trace(self._ddu(t, X, 0, 0))),
            "int_trUym": float(trym),
            "int_trUxm": float(trxm),
            "intint_trUmm": trmm,
            "max_abs_Umm": peak,
            "n": n,
        }

    def sample_cloud(self, rng, scale=1.0):
        """Random admissible cloud (grid-snapped, inside the inner half of the grid)."""
        c = scale * rng.standard_normal((self.N - 1, self.d))
        if self.is_grid:
            lim = 0.5 * self.source.grid.radius
            c = np.clip(c, -lim, lim)
            c = self._snap(c)
        return c


def lift(field):
    """Build the empirical master lift of a solved Nash field.

    Parameters
    ----------
    field : ValueField or RiccatiSolution
    """
    return MasterLift(field)


# ----------------------------------------------------------------------------
# closed-form LQ master solution
# ----------------------------------------------------------------------------


class MasterLQ:
    """``U(t, x, m) = a x^2 / 2 + b x . xbar + c |xbar|^2 / 2 + e`` for the LQ family.

    Coefficients ``(a, b, c, e)`` (alpha, beta, gamma, delta) come from a
    dense ODE solution; measure derivatives are exact.
    """

    def __init__(self, model, sol):
        self.model = model
        self.spec = model.spec
        self.d = model.dim
        self.sol = sol

    def coefficients(self, t):
        return self.sol.sol(float(t))

    def rates(self, t):
        return _master_rhs(float(t), self.coefficients(t), self.spec, self.model.sigma0, self.d)

    def _xbar(self, cloud):
        return np.mean(_as_cloud(cloud, self.d), axis=0)

    def value(self, t, x, cloud):
        al, be, ga, de = self.coefficients(t)
        x = _as_point(x, self.d)
        xb = self._xbar(cloud)
        return float(0.5 * al * x @ x + be * x @ xb + 0.5 * ga * xb @ xb + de)

    def t_deriv(self, t, x, cloud):
        al, be, ga, de = self.rates(t)
        x = _as_point(x, self.d)
        xb = self._xbar(cloud)
        return float(0.5 * al * x @ x + be * x @ xb + 0.5 * ga * xb @ xb + de)

    def dx(self, t, x, cloud):
        al, be, _, _ = self.coefficients(t)
        return al * _as_point(x, self.d) + be * self._xbar(cloud)

    def dxx(self, t, x, cloud):
        return self.coefficients(t)[0] * np.eye(self.d)

    def dm(self, t, x, cloud, y):
        _, be, ga, _ = self.coefficients(t)
        return be * _as_point(x, self.d) + ga * self._xbar(cloud)

    def dxm(self, t, x, cloud, y):
        return self.coefficients(t)[1] * np.eye(self.d)

    def dym(self, t, x, cloud, y):
        return np.zeros((self.d, self.d))

    def dmm(self, t, x, cloud, y, z):
        return self.coefficients(t)[2] * np.eye(self.d)

    def operator_terms(self, t, x, cloud):
        al, be, ga, _ = self.coefficients(t)
        d = self.d
        return {
            "Ut": self.t_deriv(t, x, cloud),
            "trUxx": d * al,
            "int_trUym": 0.0,
            "int_trUxm": d * be,
            "intint_trUmm": d * ga,
            "max_abs_Umm": abs(ga),
            "n": _as_cloud(cloud, d).shape[0],
        }


def _master_rhs(t, y, spec, sigma0, d):
    al, be, ga, _ = y
    lam, cx, qx = spec.lam, spec.c_x, spec.q_x
    rho = (al + be) / (1.0 + lam)
    kappa = be - lam * rho
    return np.array([
        al**2 - cx,
        al * kappa + cx * qx + rho * be,
        kappa**2 - cx * qx**2 + 2.0 * rho * ga,
        -d * al - sigma0 * d * (al + ga + 2.0 * be),
    ])


def solve_master_lq(model, rtol=1e-12, atol=1e-13):
    """Closed-form reduction of the master equation for the LQ family.

    The quadratic ansatz in ``(x, xbar)`` closes the master equation into
    four scalar ODEs, integrated backward from ``(c_g, -c_g q_g, c_g q_g^2, 0)``.

    Raises
    ------
    NonLqModel
    """
    if type(model) is not LqModel:
        raise NonLqModel(f"master LQ solution needs the lq family, got {type(model).__name__}")
    s = model.spec
    T = model.horizon
    yT = np.array([s.c_g, -s.c_g * s.q_g, s.c_g * s.q_g**2, 0.0])
    sol = solve_ivp(
        _master_rhs, (T, 0.0), yT, method="DOP853", rtol=rtol, atol=atol,
        dense_output=True, args=(s, model.sigma0, model.dim),
    )
    if not sol.success:
        raise RuntimeError(f"master ODE failed: {sol.message}")
    return MasterLQ(model, sol)


# ----------------------------------------------------------------------------
# residuals
# ----------------------------------------------------------------------------


def _residual_core(U, model, t, x, cloud, sigma0, tol):
    d = model.dim
    c = _as_cloud(cloud, d)
    x = _as_point(x, d)
    terms = U.operator_terms(t, x, c)
    # pushforward (Id, U_x(t, ., m))_# m and its fixed point
    p_atoms = np.array([U.dx(t, y, c) for y in c])
    mu = solve_phi(model, StateActionCloud(c, p_atoms), tol=tol)
    px = U.dx(t, x, c)
    hatH = float(model.H(x, px, mu.x, mu.a))
    dp = model.D_pH(c, p_atoms, mu.x[None], mu.a[None])
    um = np.array([U.dm(t, x, c, y) for y in c])
    transport = float(np.mean(np.sum(dp * um, axis=-1)))
    res = (
        -terms["Ut"]
        - (1 + sigma0) * terms["trUxx"]
        - (1 + sigma0) * terms["int_trUym"]
        - sigma0 * terms["intint_trUmm"]
        - 2 * sigma0 * terms["int_trUxm"]
        + hatH
        + transport
    )
    return res, terms


def me_residual(model, U, t, x, cloud, tol=1e-14):
    """Residual of the master equation for an evaluator ``U`` at ``(t, x, m)``."""
    return _residual_core(U, model, t, x, cloud, model.sigma0, tol)[0]


def master_residual(liftN, probes, model=None, sigma0=None, tol=1e-13):
    """Discrete master-equation residual of a lift at the given probes.

    Parameters
    ----------
    liftN : MasterLift
    probes : iterable of (t, x, cloud)
        Clouds must have ``N - 1`` atoms.
    model : Model, optional
        Defaults to the model attached to the lift's source.
    sigma0 : float, optional
        Overrides the common-noise intensity in the operator terms.

    Returns
    -------
    list of dict
        Keys ``N, t, probe_id, residual, envelope, ratio`` plus ``signed``
        and ``max_abs_Umm``; the envelope is ``(|x| + M_2(m_x)^{1/2}) / sqrt(N)``
        over the full player cloud.
    """
    model = liftN.model if model is None else model
    if model is None:
        raise ValueError("a model is required")
    sigma0 = model.sigma0 if sigma0 is None else sigma0
    rows = []
    for pid, (t, x, cloud) in enumerate(probes):
        X = liftN.assemble(x, cloud)
        res, terms = _residual_core(liftN, model, t, X[0], X[1:], sigma0, tol)
        m2 = float(np.mean(np.sum(X**2, axis=1)))
        env = (float(np.linalg.norm(X[0])) + math.sqrt(m2)) / math.sqrt(liftN.N)
        rows.append({
            "N": liftN.N, "t": float(t), "probe_id": pid, "residual": abs(res),
            "envelope": env, "ratio": abs(res) / env if env > 0 else float("inf"),
            "signed": res, "max_abs_Umm": terms["max_abs_Umm"],
        })
    return rows


# ----------------------------------------------------------------------------
# convergence of the lift
# ----------------------------------------------------------------------------


def quantile_cloud(n, mean=0.0, std=1.0):
    """``n`` Gaussian quantile midpoints, shape ``(n, 1)``."""
    levels = (np.arange(n) + 0.5) / n
    return (mean + std * ndtri(levels))[:, None]


def convergence_report(fields, masterU, probes):
    """``err_N = max_probes |u^{N,1}(t, x) - U(t, x^1, m^{N,-1}_x)|``.

    Parameters
    ----------
    fields : dict
        ``N -> ValueField or RiccatiSolution``.
    masterU : MasterLQ or any evaluator with ``value(t, x, cloud)``
    probes : iterable of (t, x1, cloud_fn)
        ``cloud_fn(N)`` returns the ``N - 1`` atoms for player count ``N``
        (e.g. quantiles of a fixed law).

    Returns
    -------
    list of dict with keys ``N, err``
    """
    probes = list(probes)
    rows = []
    for N in sorted(fields):
        L = MasterLift(fields[N])
        err = 0.0
        for t, x1, cloud_fn in probes:
            X = L.assemble(x1, cloud_fn(N))
            err = max(err, abs(L.value(t, X[0], X[1:]) - masterU.value(t, X[0], X[1:])))
        rows.append({"N": N, "err": err})
    return rows


# ----------------------------------------------------------------------------
# mean-field Picard solver
# ----------------------------------------------------------------------------


@dataclass
class MfgcSolution:
    """Mean-field equilibrium on a 1-D grid.

    ``value`` and ``density`` have shape ``(t_steps + 1, n)``; ``flow_x``
    and ``flow_a`` hold the state-action particles of ``mu_t`` with shape
    ``(t_steps + 1, K)``.
    """

    grid: Grid
    times: np.ndarray
    value: np.ndarray
    density: np.ndarray
    flow_x: np.ndarray
    flow_a: np.ndarray
    iterations: int
    trace: list = field(default_factory=list)
    mass_drift: float = 0.0

    def action_flow(self, k):
        return StateActionCloud(self.flow_x[k][:, None], self.flow_a[k][:, None])

    def moments(self):
        """Mean and variance of the density per time slice (trapezoid rule)."""
        z = self.grid.nodes
        mass = np.trapezoid(self.density, z, axis=1)
        mean = np.trapezoid(self.density * z, z, axis=1) / mass
        var = np.trapezoid(self.density * z**2, z, axis=1) / mass - mean**2
        return mean, var


def _hjb_backward(model, grid, fx, fa, terminal):
    """Explicit backward sweep of ``-u_t - u_xx + H(x, u_x, mu_t) = 0``."""
    z = grid.nodes
    h = grid.h
    S = grid.t_steps + 1
    u = np.empty((S, z.size))
    u[-1] = terminal
    for k in range(S - 1, 0, -1):
        p = _d1(u[k], h, 0)
        Hk = model.H(z[:, None], p[:, None], fx[k][None, :, None], fa[k][None, :, None])
        u[k - 1] = u[k] + grid.dt * (_d2(u[k], h, 0) - Hk)
    return u


def _fp_forward(model, grid, u, fx, fa, m0):
    """Conservative explicit Fokker-Planck sweep with zero-flux walls."""
    z = grid.nodes
    h = grid.h
    S = grid.t_steps + 1
    m = np.empty((S, z.size))
    m[0] = m0
    drift_mass = 0.0
    for k in range(S - 1):
        p = _d1(u[k], h, 0)
        b = -model.D_pH(z[:, None], p[:, None], fx[k][None, :, None], fa[k][None, :, None])[:, 0]
        bf = 0.5 * (b[1:] + b[:-1])
        flux = bf * 0.5 * (m[k][1:] + m[k][:-1]) - (m[k][1:] - m[k][:-1]) / h
        div = np.zeros_like(m[k])
        div[:-1] += flux
        div[1:] -= flux
        m[k + 1] = m[k] - grid.dt / h * div
        drift_mass = max(drift_mass, abs(h * (m[k + 1].sum() - m[k].sum())))
    return m, drift_mass


def _quantile_positions(z, dens, K):
    """Inverse-CDF quantile midpoints of a nodal density (piecewise-linear CDF)."""
    w = np.clip(dens, 0.0, None)
    cell = 0.5 * (w[1:] + w[:-1]) * np.diff(z)
    cdf = np.concatenate([[0.0], np.cumsum(cell)])
    cdf /= cdf[-1]
    levels = (np.arange(K) + 0.5) / K
    return np.interp(levels, cdf, z)


def _initial_flow(init, m0_x, S, K):
    base = np.broadcast_to(m0_x, (S, K)).copy()
    if init == "zero":
        return base, np.zeros((S, K))
    if init == "shifted":
        return base + 0.5, np.ones((S, K))
    if init == "spread":
        return 1.5 * base, -base
    raise ValueError(f"unknown initialization {init!r}")


def _density_from(m0_mean, m0_std, z):
    dens = np.exp(-0.5 * ((z - m0_mean) / m0_std) ** 2)
    return dens / np.trapezoid(dens, z)


def solve_mfgc_picard(model, grid1d, damping=0.5, tol=1e-4, m0_mean=1.0, m0_std=0.5,
                      particles=64, init="zero", max_iter=200):
    """Damped Picard iteration for the mean-field game of controls, ``d = 1``, ``sigma0 = 0``.

    Each iteration solves the HJB equation backward with the current flow
    ``mu_t`` frozen, the Fokker-Planck equation forward with drift
    ``-D_pH(x, u_x, mu_t)``, rebuilds ``mu_t`` as the fixed point of
    ``(Id, u_x(t, .))_# m_t`` on quantile particles, and averages old and
    new particles in quantile order.

    Parameters
    ----------
    grid1d : Grid
        ``dt`` must satisfy the one-player stability bound.
    tol : float
        Stop when the time-sup of the mean particle displacement (an upper
        bound on ``W_1`` between successive flows) drops below ``tol``.
    init : {"zero", "shifted", "spread"}
        Initial guess for ``mu_t``.

    Raises
    ------
    PicardStalled
        After ``max_iter`` outer iterations.
    """
    if model.dim != 1:
        raise ValueError("the Picard solver supports d = 1 only")
    if model.sigma0 != 0:
        raise ValueError("the Picard solver assumes sigma0 = 0")
    if abs(grid1d.horizon - model.horizon) > 1e-9 * max(1.0, model.horizon):
        raise ValueError("grid horizon differs from model horizon")
    grid1d.check_cfl(1, 0.0)
    z = grid1d.nodes
    S = grid1d.t_steps + 1
    m0 = _density_from(m0_mean, m0_std, z)
    x0 = _quantile_positions(z, m0, particles)
    fx, fa = _initial_flow(init, x0, S, particles)
    trace = []
    for it in range(1, max_iter + 1):
        terminal = model.G(z[:, None], fx[-1][:, None])
        u = _hjb_backward(model, grid1d, fx, fa, terminal)
        m, drift = _fp_forward(model, grid1d, u, fx, fa, m0)
        new_x = np.stack([_quantile_positions(z, m[k], particles) for k in range(S)])
        new_p = np.stack([np.interp(new_x[k], z, _d1(u[k], grid1d.h, 0)) for k in range(S)])
        res = _fixed_point(model, new_x[..., None], new_p[..., None], False, 1e-12, 0.5, 10000, "newton")
        new_a = res.actions[..., 0]
        # particles are already sorted by position; pair them by rank
        order = np.argsort(fx, axis=1, kind="stable")
        old_x = np.take_along_axis(fx, order, axis=1)
        old_a = np.take_along_axis(fa, order, axis=1)
        mix_x = (1 - damping) * old_x + damping * new_x
        mix_a = (1 - damping) * old_a + damping * new_a
        dist = float(np.max(np.mean(np.hypot(mix_x - old_x, mix_a - old_a), axis=1)))
        trace.append(dist)
        fx, fa = mix_x, mix_a
        if dist < tol:
            return MfgcSolution(grid1d, np.linspace(0, grid1d.horizon, S), u, m, fx, fa, it, trace, drift)
    raise PicardStalled(f"no convergence after {max_iter} iterations (last move {trace[-1]:.3e})")


def lq_moment_flow(model, times, m0_mean, m0_std):
    """Mean and variance of the LQ mean-field equilibrium flow (``sigma0 = 0``).

    Integrates ``mean' = -rho mean`` and ``var' = -2 alpha var + 2`` with
    ``alpha, rho`` from :func:`solve_master_lq`.
    """
    master = solve_master_lq(model)
    lam = model.spec.lam

    def rhs(t, y):
        al, be, _, _ = master.coefficients(t)
        rho = (al + be) / (1.0 + lam)
        return [-rho * y[0], -2.0 * al * y[1] + 2.0]

    times = np.asarray(times, float)
    sol = solve_ivp(rhs, (times[0], times[-1]), [m0_mean, m0_std**2], method="DOP853",
                    rtol=1e-11, atol=1e-12, t_eval=times)
    return sol.y[0], sol.y[1]
