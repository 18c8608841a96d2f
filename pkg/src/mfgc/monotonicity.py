"""Sampling audits of the monotonicity assumptions on model data.

All audits are necessary-condition checks: they evaluate the relevant
inequality on random empirical clouds and report the worst sample. A pass
means no violation was found, not that the condition holds everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MissingConstants
from .fixedpoint import assemble_blocks

__all__ = [
    "MonotonicityReport",
    "audit_discrete_M",
    "audit_disp_L",
    "audit_disp_G",
    "audit_ll",
    "compute_C_disp",
    "audit_ll_propagation",
    "disp_L_terms",
    "segment_quadratic_form",
    "ll_functional",
    "fit_disp_L_constants",
]

LL_TOLERANCE = 1e-12
# smallest positive double: "value >= this" is the same as "value > 0"
STRICTLY_POSITIVE = float(np.nextafter(0.0, 1.0))


@dataclass
class MonotonicityReport:
    """Outcome of one audit.

    ``passed`` is ``worst_value >= threshold``. ``values`` holds the
    per-sample quantity the worst value was taken over; ``fitted`` holds
    constants estimated from the samples.
    """

    kind: str
    samples: int
    worst_value: float
    threshold: float
    passed: bool
    witnesses: list = field(default_factory=list)
    fitted: dict = field(default_factory=dict)
    values: np.ndarray = field(default=None, repr=False)
    notes: str = ""

    def rows(self):
        """``(kind, sample_id, value)`` rows for CSV output."""
        if self.values is None:
            return [(self.kind, 0, self.worst_value)]
        return [(self.kind, k, float(v)) for k, v in enumerate(np.ravel(self.values))]


def _report(kind, values, threshold, describe, fitted=None, notes=""):
    values = np.asarray(values, float)
    worst = float(np.min(values))
    order = np.argsort(values, kind="stable")[:5]
    witnesses = [dict(describe(int(k)), sample_id=int(k), value=float(values[k])) for k in order]
    return MonotonicityReport(
        kind, int(values.size), worst, float(threshold), bool(worst >= threshold),
        witnesses, dict(fitted or {}), values, notes,
    )


def _rng(seed):
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def audit_discrete_M(model, N, samples=100, seed=0, scale=1.0):
    """Smallest eigenvalue of the symmetric part of ``M`` over random profiles.

    Profiles ``(x, a)`` are Gaussian with a random common shift so that
    large mean actions are also visited. The threshold is 0; the empirical
    minimum doubles as the fitted coercivity constant.
    """
    if N < 2:
        raise ValueError("need N >= 2")
    rng = _rng(seed)
    d = model.dim
    x = scale * rng.standard_normal((samples, N, d)) + scale * rng.standard_normal((samples, 1, d))
    a = scale * rng.standard_normal((samples, N, d)) + scale * rng.standard_normal((samples, 1, d))
    mat = assemble_blocks(model, x, a, "M").dense()
    sym = 0.5 * (mat + np.swapaxes(mat, -1, -2))
    lam = np.linalg.eigvalsh(sym)[:, 0]

    def describe(k):
        return {"N": N, "mean_x": x[k].mean(axis=0).tolist(), "mean_a": a[k].mean(axis=0).tolist()}

    return _report("discrete_M", lam, 0.0, describe, {"coercivity": float(lam.min())})


def _coupled_pairs(rng, samples, n, d, scale):
    """Pairs of equal-size clouds ``(X, A), (X', A')`` coupled by index.

    Sample structures cycle through: independent pairs, common shifts of
    the same cloud (large mean differences) and pairs with ``X = X'``.
    """
    X = scale * rng.standard_normal((samples, n, d))
    A = scale * rng.standard_normal((samples, n, d))
    Xp = scale * rng.standard_normal((samples, n, d))
    Ap = scale * rng.standard_normal((samples, n, d))
    kind = np.arange(samples) % 3
    shift_x = scale * rng.standard_normal((samples, 1, d))
    shift_a = scale * rng.standard_normal((samples, 1, d))
    small = 0.1 * scale * rng.standard_normal((samples, n, d))
    common = kind == 1
    Xp[common] = X[common] + shift_x[common]
    Ap[common] = A[common] + shift_a[common] + small[common]
    same_x = kind == 2
    Xp[same_x] = X[same_x]
    return X, A, Xp, Ap


def disp_L_terms(model, X, A, Xp, Ap):
    """Per-sample pieces of the displacement inequality for ``L``.

    Returns ``lhs = E[(D_aL - D_aL')·dA + (D_xL - D_xL')·dX]``, ``E|dA|^2``
    and ``E|dX|^2`` for clouds of shape ``(..., n, d)`` coupled by index.
    """
    cx, ca = X[..., None, :, :], A[..., None, :, :]
    cxp, cap = Xp[..., None, :, :], Ap[..., None, :, :]
    dX, dA = X - Xp, A - Ap
    ga = model.D_aL(X, A, cx, ca) - model.D_aL(Xp, Ap, cxp, cap)
    gx = model.D_xL(X, A, cx, ca) - model.D_xL(Xp, Ap, cxp, cap)
    lhs = np.mean(np.sum(ga * dA + gx * dX, axis=-1), axis=-1)
    return lhs, np.mean(np.sum(dA**2, axis=-1), axis=-1), np.mean(np.sum(dX**2, axis=-1), axis=-1)


def segment_quadratic_form(model, X, A, Xp, Ap, nodes=16):
    """Second-order form of the displacement inequality integrated along the segment.

    With ``z_t = z' + t (z - z')`` and ``dz = z - z'`` on a single coupled
    pair of clouds, returns the Gauss-Legendre approximation of
    ``int_0^1 E[dz^T D^2 L(z_t) dz + dz^T D_mu D L(z_t, z_hat_t) dz_hat] dt``.
    This equals the integrated first-order left side exactly in exact
    arithmetic.
    """
    X, A, Xp, Ap = (np.asarray(v, float) for v in (X, A, Xp, Ap))
    n = X.shape[0]
    dX, dA = X - Xp, A - Ap
    ts, ws = np.polynomial.legendre.leggauss(nodes)
    ts, ws = 0.5 * (ts + 1.0), 0.5 * ws
    total = 0.0
    for t, w in zip(ts, ws):
        x, a = Xp + t * dX, Ap + t * dA
        # local second-order part
        Dxx = model.D_xxL(x, a, x, a)
        Dxa = model.D_xaL(x, a, x, a)  # rows: components of D_aL
        Daa = model.D_aaL(x, a, x, a)
        loc = (
            np.einsum("kr,krc,kc->k", dX, Dxx, dX)
            + 2.0 * np.einsum("kr,krc,kc->k", dA, Dxa, dX)
            + np.einsum("kr,krc,kc->k", dA, Daa, dA)
        )
        # interaction part, averaged over ordered pairs of particles
        xi, ai = x[:, None, :], a[:, None, :]
        xl, al = x[None, :, :], a[None, :, :]
        cx, ca = x[None, None, :, :], a[None, None, :, :]
        terms = (
            np.einsum("kr,klrc,lc->kl", dX, model.Dmu_x_D_xL(xi, ai, cx, ca, xl, al), dX)
            + np.einsum("kr,klrc,lc->kl", dX, model.Dmu_a_D_xL(xi, ai, cx, ca, xl, al), dA)
            + np.einsum("kr,klrc,lc->kl", dA, model.Dmu_x_D_aL(xi, ai, cx, ca, xl, al), dX)
            + np.einsum("kr,klrc,lc->kl", dA, model.Dmu_a_D_aL(xi, ai, cx, ca, xl, al), dA)
        )
        total += w * (np.mean(loc) + np.sum(terms) / n**2)
    return float(total)


def _declared(model, keys, strict):
    have = all(k in model.constants for k in keys)
    if not have and strict:
        raise MissingConstants(f"model {model.name!r} declares no {', '.join(keys)}")
    return have


def fit_disp_L_constants(lhs, A, B):
    """Least-violation estimate of ``(C_La, C_Lx)`` from per-sample terms.

    ``c(C_x) = min_s (lhs_s + C_x B_s) / A_s`` is the largest ``C_La``
    compatible with a given ``C_Lx = C_x``. If ``c(0) > 0`` the fit is
    ``(c(0), 0)``. Otherwise ``C_x`` is the smallest value (by bisection)
    at which ``c`` reaches half of its value at a large cap.
    """
    lhs, A, B = (np.asarray(v, float) for v in (lhs, A, B))
    keep = A > 1e-14
    if not np.any(keep):
        return {"C_La": float("nan"), "C_Lx": 0.0}
    lhs, A, B = lhs[keep], A[keep], B[keep]

    def c_of(cx):
        return float(np.min((lhs + cx * B) / A))

    c0 = c_of(0.0)
    if c0 > 0:
        return {"C_La": c0, "C_Lx": 0.0}
    cap = 1.0
    while c_of(cap) <= 0 and cap < 1e8:
        cap *= 10.0
    target = 0.5 * c_of(cap)
    if target <= 0:
        return {"C_La": c_of(cap), "C_Lx": cap}
    lo, hi = 0.0, cap
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if c_of(mid) >= target:
            hi = mid
        else:
            lo = mid
    return {"C_La": c_of(hi), "C_Lx": hi}


def audit_disp_L(model, samples=200, cloud_size=16, seed=0, scale=1.0, strict=False):
    """Displacement semi-monotonicity of ``L`` on coupled random clouds.

    The per-sample slack is ``lhs - C_La E|dA|^2 + C_Lx E|dX|^2`` with the
    model's declared constants. Without declared constants the fitted ones
    are used (``strict=True`` raises :class:`MissingConstants` instead).
    """
    if cloud_size < 2:
        raise ValueError("cloud_size must be at least 2")
    rng = _rng(seed)
    X, A, Xp, Ap = _coupled_pairs(rng, samples, cloud_size, model.dim, scale)
    lhs, EA, EX = disp_L_terms(model, X, A, Xp, Ap)
    fitted = fit_disp_L_constants(lhs, EA, EX)
    if _declared(model, ("C_La", "C_Lx"), strict):
        c_a, c_x = model.constants["C_La"], model.constants["C_Lx"]
        notes = "declared constants"
    else:
        c_a, c_x = fitted["C_La"], fitted["C_Lx"]
        notes = "no declared constants; slack uses fitted values"
    slack = lhs - c_a * EA + c_x * EX
    # scale-aware roundoff allowance
    threshold = -1e-12 * float(np.max(np.abs(lhs)) + 1.0)

    def describe(k):
        return {"lhs": float(lhs[k]), "E|da|^2": float(EA[k]), "E|dx|^2": float(EX[k]), "structure": int(k % 3)}

    return _report("disp_L", slack, threshold, describe, fitted, notes)


def audit_disp_G(model, samples=200, cloud_size=16, seed=0, scale=1.0, strict=False):
    """Displacement semi-monotonicity of ``G``: slack ``lhs + C_G E|dX|^2``."""
    if cloud_size < 2:
        raise ValueError("cloud_size must be at least 2")
    rng = _rng(seed)
    X, _, Xp, _ = _coupled_pairs(rng, samples, cloud_size, model.dim, scale)
    dX = X - Xp
    g = model.D_xG(X, X[..., None, :, :]) - model.D_xG(Xp, Xp[..., None, :, :])
    lhs = np.mean(np.sum(g * dX, axis=-1), axis=-1)
    EX = np.mean(np.sum(dX**2, axis=-1), axis=-1)
    keep = EX > 1e-14
    fitted = {"C_G": float(max(0.0, np.max(-lhs[keep] / EX[keep]))) if np.any(keep) else 0.0}
    if _declared(model, ("C_G",), strict):
        c_g, notes = model.constants["C_G"], "declared constants"
    else:
        c_g, notes = fitted["C_G"], "no declared constants; slack uses fitted values"
    slack = lhs + c_g * EX
    threshold = -1e-12 * float(np.max(np.abs(lhs)) + 1.0)

    def describe(k):
        return {"lhs": float(lhs[k]), "E|dx|^2": float(EX[k]), "structure": int(k % 3)}

    return _report("disp_G", slack, threshold, describe, fitted, notes)


def ll_functional(model, which, X, A, Xp, Ap):
    """``int [F(z, mu) - F(z, mu')] d(mu - mu')(z)`` for clouds ``mu``, ``mu'``.

    ``which`` is ``"L"`` (state-action clouds) or ``"G"`` (states only, the
    action arrays are ignored). Leading axes are independent samples.
    """
    cx, cxp = X[..., None, :, :], Xp[..., None, :, :]
    if which == "L":
        ca, cap = A[..., None, :, :], Ap[..., None, :, :]
        on_mu = model.L(X, A, cx, ca) - model.L(X, A, cxp, cap)
        on_mup = model.L(Xp, Ap, cx, ca) - model.L(Xp, Ap, cxp, cap)
    elif which == "G":
        on_mu = model.G(X, cx) - model.G(X, cxp)
        on_mup = model.G(Xp, cx) - model.G(Xp, cxp)
    else:
        raise ValueError("which must be 'L' or 'G'")
    return np.mean(on_mu, axis=-1) - np.mean(on_mup, axis=-1)


def audit_ll(model, which="L", samples=200, cloud_size=16, seed=0, scale=1.0):
    """Lasry-Lions monotonicity of ``L`` or ``G`` on random cloud pairs.

    Threshold is ``-1e-12`` (roundoff allowance). A failing report lists
    the most negative samples as witnesses.
    """
    if cloud_size < 2:
        raise ValueError("cloud_size must be at least 2")
    rng = _rng(seed)
    X, A, Xp, Ap = _coupled_pairs(rng, samples, cloud_size, model.dim, scale)
    values = ll_functional(model, which, X, A, Xp, Ap)

    def describe(k):
        return {
            "mean_a_gap": (A[k].mean(axis=0) - Ap[k].mean(axis=0)).tolist(),
            "mean_x_gap": (X[k].mean(axis=0) - Xp[k].mean(axis=0)).tolist(),
        }

    return _report(f"ll_{which}", values, -LL_TOLERANCE, describe)


def compute_C_disp(model, constants=None):
    """``C_disp = C_La - T C_G - (T^2 / 2) C_Lx``; passes when strictly positive.

    Parameters
    ----------
    constants : dict, optional
        Overrides (e.g. fitted values from the audits). Missing keys fall
        back to the model's declared constants.

    Raises
    ------
    MissingConstants
    """
    merged = dict(model.constants)
    merged.update(constants or {})
    missing = [k for k in ("C_La", "C_Lx", "C_G") if k not in merged]
    if missing:
        raise MissingConstants(f"constants missing: {', '.join(missing)}")
    T = model.horizon
    value = merged["C_La"] - T * merged["C_G"] - 0.5 * T**2 * merged["C_Lx"]
    rep = _report("C_disp", [value], STRICTLY_POSITIVE, lambda k: dict(merged, T=T))
    rep.fitted = {k: float(merged[k]) for k in ("C_La", "C_Lx", "C_G")}
    return rep


def audit_ll_propagation(lift, times, cloud_pairs, tolerance=1e-8):
    """Lasry-Lions monotonicity of ``x -> U(t, x, m)`` along a computed solution.

    Parameters
    ----------
    lift : object
        Anything with ``value(t, x, cloud)`` and ``dxx(t, x, cloud)``
        evaluators for a single point ``x`` (shape ``(d,)``) and a cloud
        array of shape ``(n, d)``.
    times : sequence of float
    cloud_pairs : sequence of (ndarray, ndarray)
        Pairs ``(m, m')`` of admissible clouds.
    tolerance : float
        Allowed negative slack (discretization error budget).

    Returns
    -------
    MonotonicityReport
        ``values[t_idx]`` is the minimum over pairs at that time;
        ``fitted["max_Uxx"]`` lists ``max |U_xx|`` per time slice.
    """
    times = list(times)
    per_time = np.empty(len(times))
    max_uxx = []
    for ti, t in enumerate(times):
        worst = np.inf
        peak = 0.0
        for m, mp in cloud_pairs:
            on_m = [lift.value(t, x, m) - lift.value(t, x, mp) for x in m]
            on_mp = [lift.value(t, x, m) - lift.value(t, x, mp) for x in mp]
            worst = min(worst, float(np.mean(on_m) - np.mean(on_mp)))
            for x in m:
                peak = max(peak, float(np.max(np.abs(lift.dxx(t, x, m)))))
        per_time[ti] = worst
        max_uxx.append(peak)

    def describe(k):
        return {"t": float(times[k])}

    return _report("ll_U", per_time, -tolerance, describe, {"max_Uxx": max_uxx, "times": [float(t) for t in times]})
