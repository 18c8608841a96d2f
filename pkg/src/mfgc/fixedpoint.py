"""Best-response fixed points, block matrices and implicit Jacobians.

Two conventions are implemented:

* ``solve_aN`` solves the N-player profile where player ``i`` reacts to the
  empirical measure of the *other* ``N - 1`` players,
  ``a^i = -D_pH(x^i, p^i, m^{N,-i}_{x,a})``.
* ``solve_phi`` solves the measure-level map where every particle reacts to
  the full cloud including itself.

Player profiles are arrays of shape ``(..., N, d)``; leading axes are solved
independently, which lets the grid solver process every node at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from scipy.special import ndtri

from .errors import NoConvergence, SingularM
from .model import StateActionCloud
from .utils import omega

__all__ = [
    "FixedPointResult",
    "BlockMatrix",
    "others_index",
    "solve_aN",
    "solve_phi",
    "assemble_blocks",
    "jacobian_p",
    "jacobian_x",
    "higher_derivatives",
    "hatH_eval",
    "hatHik_eval",
    "DECAY_HEADER",
    "decay_profile",
]

DECAY_HEADER = ("N", "i", "j", "k", "l", "omega", "norm", "norm_over_omega")
FLAVORS = ("D", "O", "M", "Dtilde", "Otilde", "Mtilde")


@dataclass
class FixedPointResult:
    """Solved action profile.

    Attributes
    ----------
    actions : ndarray, shape (..., N, d)
    residual : float
        ``max |a^i + D_pH(x^i, p^i, m^{-i})|`` over players (and batch).
    iterations : int
    method : str
        ``"damped"`` if Picard alone converged, otherwise ``"newton"``.
    trace : list of float
        Residual after each iteration.
    """

    actions: np.ndarray
    residual: float
    iterations: int
    method: str
    trace: list = field(default_factory=list, repr=False)


@dataclass
class BlockMatrix:
    """``N x N`` array of ``d x d`` blocks, shape ``(..., N, N, d, d)``."""

    blocks: np.ndarray
    flavor: str

    @property
    def N(self):
        return self.blocks.shape[-4]

    @property
    def dim(self):
        return self.blocks.shape[-1]

    def dense(self):
        """Flatten to ``(..., N d, N d)`` with player-major ordering."""
        b = self.blocks
        lead = b.shape[:-4]
        N, d = b.shape[-4], b.shape[-1]
        return np.swapaxes(b, -3, -2).reshape(lead + (N * d, N * d))

    @classmethod
    def from_dense(cls, mat, N, flavor):
        lead = mat.shape[:-2]
        d = mat.shape[-1] // N
        blocks = np.swapaxes(mat.reshape(lead + (N, d, N, d)), -3, -2)
        return cls(np.ascontiguousarray(blocks), flavor)

    def block(self, i, j):
        return self.blocks[..., i, j, :, :]


_INDEX_CACHE = {}


def others_index(N):
    """``(N, N-1)`` integer array; row ``i`` lists the players other than ``i``."""
    if N not in _INDEX_CACHE:
        _INDEX_CACHE[N] = np.array([[j for j in range(N) if j != i] for i in range(N)], dtype=int)
    return _INDEX_CACHE[N]


def _profile(arr, name):
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim < 2 or arr.shape[-2] < 1:
        raise ValueError(f"{name} must have shape (..., N, d)")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def _clouds(v, exclude_self):
    """Measure argument seen by each player: ``(..., N, N-1, d)`` or ``(..., 1, n, d)``."""
    if exclude_self:
        return v[..., others_index(v.shape[-2]), :]
    return v[..., None, :, :]


def _pair_clouds(v, exclude_self):
    """Clouds with an extra axis so they pair with a particle index."""
    c = _clouds(v, exclude_self)
    return c[..., :, None, :, :]


def _response(model, x, p, a, exclude_self):
    """Best response ``-D_pH`` of every player against the current profile."""
    return -model.D_pH(x, p, _clouds(x, exclude_self), _clouds(a, exclude_self))


def _response_jacobian(model, x, p, a, exclude_self):
    """Jacobian of ``F(a) = a + D_pH(., m(a))`` in block form ``(..., N, N, d, d)``."""
    N, d = x.shape[-2], x.shape[-1]
    xi, pi = x[..., :, None, :], p[..., :, None, :]
    xl, al = x[..., None, :, :], a[..., None, :, :]
    blocks = model.Dmu_a_D_pH(xi, pi, _pair_clouds(x, exclude_self), _pair_clouds(a, exclude_self), xl, al)
    blocks = np.broadcast_to(blocks, x.shape[:-2] + (N, N, d, d)).copy()
    if exclude_self:
        blocks /= N - 1
        blocks[..., np.arange(N), np.arange(N), :, :] = 0.0
    else:
        blocks /= N
    blocks[..., np.arange(N), np.arange(N), :, :] += np.eye(d)
    return BlockMatrix(blocks, "M")


def _newton_step(model, x, p, a, exclude_self, residual_vec):
    jac = _response_jacobian(model, x, p, a, exclude_self).dense()
    flat = residual_vec.reshape(residual_vec.shape[:-2] + (-1,))
    step = np.linalg.solve(jac, flat[..., None])[..., 0]
    return a - step.reshape(a.shape)


def _fixed_point(model, x, p, exclude_self, tol, theta, max_iter, method, a0=None):
    if tol <= 0:
        raise ValueError("tol must be positive")
    if method not in ("auto", "picard", "newton"):
        raise ValueError(f"unknown method {method!r}")
    if a0 is None:
        # initial guess: players respond to a cloud whose actions are the costates
        a = _response(model, x, p, p, exclude_self)
    else:
        a = np.array(a0, dtype=float)
    trace = []
    # one Newton step is exact for an affine response
    use_newton = method == "newton" or (method == "auto" and getattr(model, "affine_response", False))
    picard_only = True
    for it in range(1, max_iter + 1):
        target = _response(model, x, p, a, exclude_self)
        gap = a - target
        res = float(np.max(np.abs(gap))) if gap.size else 0.0
        trace.append(res)
        if not np.isfinite(res):
            raise NoConvergence("fixed-point iteration produced non-finite values", res)
        if res <= tol:
            return FixedPointResult(a, res, it, "damped" if picard_only else "newton", trace)
        if use_newton:
            picard_only = False
            a = _newton_step(model, x, p, a, exclude_self, gap)
        else:
            a = (1.0 - theta) * a + theta * target
            if method == "auto" and it >= 20 and it % 20 == 0 and trace[-1] > trace[-20] / 10.0:
                use_newton = True
    raise NoConvergence(f"no convergence after {max_iter} iterations (residual {trace[-1]:.3e})", trace[-1])


def solve_aN(model, x, p, tol=1e-12, theta=0.5, max_iter=10000, method="auto", a0=None):
    """Solve ``a^i = -D_pH(x^i, p^i, m^{N,-i}_{x,a})`` for all players.

    Parameters
    ----------
    model : Model
    x, p : array_like, shape (..., N, d)
        States and costates; leading axes are independent problems.
    tol : float
        Target sup-norm of the fixed-point residual.
    theta : float
        Picard damping.
    method : {"auto", "picard", "newton"}
        ``"auto"`` runs damped Picard and switches to Newton when the
        residual drops by less than a factor 10 over 20 iterations; models
        with an affine best response go straight to Newton.

    Returns
    -------
    FixedPointResult

    Raises
    ------
    NoConvergence
        After ``max_iter`` iterations.
    """
    x = _profile(x, "x")
    p = _profile(p, "p")
    if x.shape != p.shape:
        raise ValueError(f"x and p shapes differ: {x.shape} vs {p.shape}")
    if x.shape[-2] < 2:
        raise ValueError("need at least two players")
    return _fixed_point(model, x, p, True, tol, theta, max_iter, method, a0)


def solve_phi(model, nu, tol=1e-12, theta=0.5, max_iter=10000, method="auto"):
    """Self-consistent action cloud for a state-costate cloud ``nu``.

    Every particle responds to the full returned cloud:
    ``a_j = -D_pH(x_j, p_j, mu)`` with ``mu = (x_j, a_j)_j``.

    Parameters
    ----------
    nu : StateActionCloud
        Particles ``(x_j, p_j)``; the second slot holds costates.

    Returns
    -------
    StateActionCloud
        Same states, solved actions.
    """
    res = _fixed_point(model, nu.x, nu.a, False, tol, theta, max_iter, method)
    return StateActionCloud(nu.x.copy(), res.actions)


def assemble_blocks(model, x, a, flavor="M"):
    """Block matrices of action derivatives of ``D_aL`` at the profile ``(x, a)``.

    ``D``: diagonal blocks ``D_aaL(x^i, a^i, m^{-i})``.
    ``O``: off-diagonal blocks ``D^a_mu D_aL(x^i, a^i, m^{-i}, x^j, a^j) / (N-1)``.
    ``Dtilde`` and ``Otilde`` use ``D_xaL`` and ``D^x_mu D_aL`` instead;
    ``M = D + O`` and ``Mtilde = Dtilde + Otilde``.
    """
    if flavor not in FLAVORS:
        raise ValueError(f"unknown flavor {flavor!r}")
    x = _profile(x, "x")
    a = _profile(a, "a")
    N, d = x.shape[-2], x.shape[-1]
    if N < 2:
        raise ValueError("need at least two players")
    out = np.zeros(x.shape[:-2] + (N, N, d, d))
    tilde = flavor.endswith("tilde")
    diag_fn = model.D_xaL if tilde else model.D_aaL
    off_fn = model.Dmu_x_D_aL if tilde else model.Dmu_a_D_aL
    base = flavor[0]
    if base in ("D", "M"):
        diag = diag_fn(x, a, _clouds(x, True), _clouds(a, True))
        out[..., np.arange(N), np.arange(N), :, :] = diag
    if base in ("O", "M"):
        off = off_fn(
            x[..., :, None, :], a[..., :, None, :], _pair_clouds(x, True), _pair_clouds(a, True),
            x[..., None, :, :], a[..., None, :, :],
        )
        off = np.broadcast_to(off, out.shape) / (N - 1)
        mask = ~np.eye(N, dtype=bool)
        out[..., mask, :, :] += off[..., mask, :, :]
    return BlockMatrix(out, flavor)


def _solve_M(M, rhs, N):
    mat = M.dense()
    sym = 0.5 * (mat + np.swapaxes(mat, -1, -2))
    try:
        cond = np.linalg.cond(mat)
        if not np.all(np.isfinite(cond)) or np.any(cond > 1e14):
            raise np.linalg.LinAlgError("ill-conditioned")
        sol = np.linalg.solve(mat, rhs)
    except np.linalg.LinAlgError as exc:
        lam = float(np.min(np.linalg.eigvalsh(sym)))
        raise SingularM(f"block matrix is singular ({exc}); min eigenvalue of symmetric part {lam:.3e}", lam) from None
    return sol


def jacobian_p(model, x, a):
    """``D_p a = -M^{-1}`` at a solved profile; block ``(i, j)`` is ``D_{p^j} a^i``.

    Raises
    ------
    SingularM
        When ``M`` cannot be factorized.
    """
    M = assemble_blocks(model, x, a, "M")
    N, d = M.N, M.dim
    eye = np.broadcast_to(np.eye(N * d), M.blocks.shape[:-4] + (N * d, N * d))
    return BlockMatrix.from_dense(-_solve_M(M, eye, N), N, "Dp")


def jacobian_x(model, x, a):
    """``D_x a = -M^{-1} Mtilde`` at a solved profile; block ``(i, j)`` is ``D_{x^j} a^i``."""
    M = assemble_blocks(model, x, a, "M")
    Mt = assemble_blocks(model, x, a, "Mtilde")
    return BlockMatrix.from_dense(-_solve_M(M, Mt.dense(), M.N), M.N, "Dx")


def _jacobian_at(model, x, p, variable, tol):
    a = solve_aN(model, x, p, tol=tol, method="newton").actions
    jac = jacobian_p if variable == "p" else jacobian_x
    return jac(model, x, a).blocks


def higher_derivatives(model, x, p, order, probe_indices, variable="p", h=None, tol=1e-14):
    """Norms of mixed derivatives of the action profile, with omega weights.

    Parameters
    ----------
    order : {1, 2, 3}
        ``1`` reads the implicit Jacobian directly; ``2`` and ``3`` take
        central differences of it (step ``h``, default ``1e-4``).
    probe_indices : iterable of tuples
        ``(i, j)``, ``(i, j, k)`` or ``(i, j, k, l)`` (0-based) matching
        ``order``. The tuple ``(i, j, k)`` measures ``D_{v^k v^j} a^i``.
    variable : {"p", "x"}
        Differentiation variable.

    Returns
    -------
    list of dict
        Rows keyed by ``DECAY_HEADER``; missing indices are ``None``.
    """
    if order not in (1, 2, 3):
        raise ValueError("order must be 1, 2 or 3")
    if variable not in ("p", "x"):
        raise ValueError("variable must be 'p' or 'x'")
    h = 1e-4 if h is None else h
    x = _profile(x, "x")
    p = _profile(p, "p")
    N, d = x.shape
    probes = [tuple(int(v) for v in t) for t in probe_indices]
    for t in probes:
        if len(t) != order + 1:
            raise ValueError(f"probe {t} does not match order {order}")

    def jac(shifts):
        xx, pp = x.copy(), p.copy()
        target = pp if variable == "p" else xx
        for (player, coord), delta in shifts:
            target[player, coord] += delta
        return _jacobian_at(model, xx, pp, variable, tol)

    cache = {}

    def cached(shifts):
        key = tuple(sorted(shifts))
        if key not in cache:
            cache[key] = jac(list(key))
        return cache[key]

    rows = []
    for t in probes:
        i, j = t[0], t[1]
        if order == 1:
            value = cached(())[i, j]
        elif order == 2:
            k = t[2]
            value = np.empty((d, d, d))
            for c in range(d):
                plus = cached((((k, c), h),))
                minus = cached((((k, c), -h),))
                value[:, :, c] = (plus[i, j] - minus[i, j]) / (2 * h)
        else:
            k, l = t[2], t[3]
            value = np.empty((d, d, d, d))
            for c in range(d):
                for e in range(d):
                    if (k, c) == (l, e):
                        plus = cached((((k, c), h),))
                        minus = cached((((k, c), -h),))
                        mid = cached(())
                        value[:, :, c, e] = (plus[i, j] - 2 * mid[i, j] + minus[i, j]) / h**2
                    else:
                        pp = cached((((k, c), h), ((l, e), h)))
                        pm = cached((((k, c), h), ((l, e), -h)))
                        mp = cached((((k, c), -h), ((l, e), h)))
                        mm = cached((((k, c), -h), ((l, e), -h)))
                        value[:, :, c, e] = (pp[i, j] - pm[i, j] - mp[i, j] + mm[i, j]) / (4 * h**2)
        norm = float(np.linalg.norm(value))
        w = omega(N, t)
        padded = list(t) + [None] * (4 - len(t))
        rows.append(
            {"N": N, "i": padded[0], "j": padded[1], "k": padded[2], "l": padded[3],
             "omega": w, "norm": norm, "norm_over_omega": norm / w}
        )
    return rows


def hatH_eval(model, x, p, i, tol=1e-12):
    """``H(x^i, p^i, m^{N,-i}_{x,a})`` at the solved profile ``a = a^N(x, p)``."""
    x = _profile(x, "x")
    p = _profile(p, "p")
    a = solve_aN(model, x, p, tol=tol).actions
    idx = others_index(x.shape[-2])[i]
    return model.H(x[..., i, :], p[..., i, :], x[..., idx, :], a[..., idx, :])


def hatHik_eval(model, x, p, i, k, tol=1e-12):
    """``(1/(N-1)) sum_{l != i} D^a_mu H(x^i, p^i, m^{-i}, x^l, a^l) . D_{p^k} a^l``.

    For ``k != i`` this is the derivative of ``hatH_eval(., i)`` in ``p^k``.
    """
    x = _profile(x, "x")
    p = _profile(p, "p")
    N = x.shape[-2]
    a = solve_aN(model, x, p, tol=tol).actions
    jp = jacobian_p(model, x, a).blocks
    idx = others_index(N)[i]
    xi, pi = x[i], p[i]
    cx, ca = x[idx], a[idx]
    grads = model.Dmu_a_H(xi[None, :], pi[None, :], cx[None], ca[None], x[idx], a[idx])
    # grads[m] pairs with the player idx[m]; contract against D_{p^k} a^l
    out = np.einsum("md,mdc->c", grads, jp[idx, k])
    return out / (N - 1)


def decay_profile(N, d=1, seed=0, anchor=(0.3, 0.2), shift=0.5):
    """Profile ``(x, p)`` whose empirical law is stable across ``N``.

    Players ``2..N`` take Gaussian quantile midpoints (costates shifted by
    ``shift``) paired by seeded permutations; player 1 sits at ``anchor``.
    Comparing derivative norms across ``N`` then isolates the ``N``
    dependence from sampling noise in the mean field.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(N)]))
    q = ndtri((np.arange(N) + 0.5) / N)
    x = np.stack([q[rng.permutation(N)] for _ in range(d)], axis=1)
    p = np.stack([shift + q[rng.permutation(N)] for _ in range(d)], axis=1)
    x[0], p[0] = anchor[0], anchor[1]
    return x, p
