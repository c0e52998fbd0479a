"""Element-local HDG/mixed operators for diffusion with static condensation.

On one element the unknowns are ``q`` (V coordinates) and ``u`` (W
coordinates); the trace ``uhat`` lives in M coordinates.  The local problem is

    (c q, v) - (u, div v) + <uhat, v.n> = 0
    (div q, w) + <alpha(u - uhat), w>    = (f, w)

and the numerical flux functional is ``<q.n + alpha(u - uhat), mu>``.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import AssemblyError, IllConditionedMaterial, InvalidArgument

log = logging.getLogger(__name__)

ALPHA_MODES = ("minimal", "scaled-full", "zero")


def alpha_matrix(sp, mode="minimal", scale=1.0):
    """Stabilization operator in M coordinates (nM, nM)."""
    if mode == "minimal":
        P = sp.P_Ms
    elif mode == "scaled-full":
        P = np.eye(sp.nM)
    elif mode == "zero":
        P = np.zeros((sp.nM, sp.nM))
    else:
        raise InvalidArgument(f"unknown alpha mode {mode!r}")
    return scale / sp.h * P


def apply_minimal_alpha(sp, g):
    """h_K^-1 P_MS g for boundary data given in M coordinates."""
    return alpha_matrix(sp, "minimal") @ np.asarray(g, dtype=float)


def material_gram(sp, c=None, x0=None):
    """(c v_a, v_b) for constant, matrix-valued or callable c."""
    if c is None:
        return sp.gram_V.copy()
    if callable(c):
        if x0 is None:
            raise InvalidArgument("variable c needs the element offset")
        cq = np.asarray(c(sp.to_physical(x0, sp.xq)), dtype=float)
        if cq.ndim == 1:
            cq = cq[:, None, None] * np.eye(2)
    else:
        cc = np.asarray(c, dtype=float)
        cq = (cc * np.eye(2) if cc.ndim == 0 else cc)[None].repeat(len(sp.wq), axis=0)
    lam = np.linalg.eigvalsh(0.5 * (cq + np.swapaxes(cq, 1, 2)))
    if lam.min() <= 0:
        raise IllConditionedMaterial("c is not positive definite at a quadrature point")
    A = np.einsum("p,pac,pcd,pbd->ab", sp.wq, sp.V_vals, cq, sp.V_vals)
    return 0.5 * (A + A.T)


def local_gradient_map(sp, u, uhat, c=None, x0=None):
    """q in V(K) with (c q, v) = (u, div v) - <uhat, v.n> for all v."""
    A = material_gram(sp, c, x0)
    rhs = sp.Dm @ np.asarray(u, dtype=float) - sp.Cm @ np.asarray(uhat, dtype=float)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedMaterial("singular c-weighted Gram") from exc
    return np.linalg.solve(L.T, np.linalg.solve(L, rhs))


@dataclass(frozen=True)
class LocalOperatorSet:
    """Dense local solver and condensed trace operator of one element class.

    ``solve_uhat`` (nV+nW, nM) and ``solve_load`` (nV+nW, nW) map the trace and
    the load vector ``(f, w_b)`` to ``[q; u]``.  ``schur`` (nM, nM) and
    ``load_flux`` (nM, nW) give the negated flux functional
    ``-<qhat.n, mu> = schur @ uhat - load_flux @ F``.
    """

    matrix: np.ndarray
    A: np.ndarray
    alpha: np.ndarray
    solve_uhat: np.ndarray
    solve_load: np.ndarray
    schur: np.ndarray
    load_flux: np.ndarray
    cond: float
    nV: int
    nW: int

    def split(self, x):
        return x[: self.nV], x[self.nV:]


def assemble_local_diffusion(sp, c=None, alpha_mode="minimal", x0=None, alpha_scale=1.0):
    A = material_gram(sp, c, x0)
    tauP = alpha_matrix(sp, alpha_mode, alpha_scale)
    Suu = sp.Tw.T @ tauP @ sp.Tw
    Suh = sp.Tw.T @ tauP
    nV, nW = sp.nV, sp.nW
    K = np.block([[A, -sp.Dm], [sp.Dm.T, Suu]])
    rhs_uhat = np.vstack([-sp.Cm, Suh])
    rhs_load = np.vstack([np.zeros((nV, nW)), np.eye(nW)])
    cond = float(np.linalg.cond(K))
    if not np.isfinite(cond) or cond > 1e14:
        raise AssemblyError(f"singular local diffusion solver (cond={cond:.2e})")
    X = np.linalg.solve(K, np.hstack([rhs_uhat, rhs_load]))
    Xh, Xf = X[:, : sp.nM], X[:, sp.nM:]
    # flux functional <q.n + alpha(u - uhat), mu> as a map of [q; u; uhat]
    flux_qu = np.hstack([sp.Cm.T, tauP @ sp.Tw])
    schur = -(flux_qu @ Xh - tauP)
    load_flux = flux_qu @ Xf
    log.debug("local diffusion solver cond=%.3e", cond)
    return LocalOperatorSet(K, A, tauP, Xh, Xf, 0.5 * (schur + schur.T), load_flux, cond, nV, nW)


def condense(ops):
    """(Schur matrix, load-to-trace-load map) of the local operator set."""
    return ops.schur, ops.load_flux


def reconstruct(ops, uhat, load):
    """(q, u) from the trace and the load vector (f, w_b)."""
    x = ops.solve_uhat @ np.asarray(uhat) + ops.solve_load @ np.asarray(load)
    return ops.split(x)


def numerical_flux(sp, ops, q, u, uhat):
    """M coordinates of <qhat.n, mu> = <q.n + alpha(u - uhat), mu>."""
    return sp.Cm.T @ q + ops.alpha @ (sp.Tw @ u - uhat)


def load_vector(sp, f, x0):
    """(f, w_b)_K for a callable f of physical points."""
    fx = np.asarray(f(sp.to_physical(x0, sp.xq)), dtype=float)
    return sp.W_vals.T @ (sp.wq * fx)


def local_energy(sp, q, u, uhat, alpha_mode="minimal", c=None, x0=None):
    """E_K = (c q, q) + <alpha(u - uhat), u - uhat>."""
    A = material_gram(sp, c, x0)
    jump = sp.Tw @ u - uhat
    return float(q @ A @ q + jump @ alpha_matrix(sp, alpha_mode) @ jump)
