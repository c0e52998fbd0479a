"""Global HDG / hybridized mixed solver for steady diffusion -div(c^-1 ... ) form.

Solves q = -c^{-1} grad u (written as c q + grad u = 0), div q = f, u = g on
the boundary, by condensing to the trace unknowns on interior faces.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .errors import SolverError
from .localops import assemble_local_diffusion, load_vector, local_energy, numerical_flux
from .spaces import MeshSpaces

log = logging.getLogger(__name__)
SCHEMA_VERSION = 1


@dataclass
class TraceSystem:
    matrix: sps.csr_matrix
    load: np.ndarray
    free: np.ndarray
    fixed: np.ndarray
    fixed_values: np.ndarray


@dataclass
class FieldSolution:
    spaces: MeshSpaces
    q: np.ndarray  # (ne, nV)
    u: np.ndarray  # (ne, nW)
    uhat: np.ndarray  # (n_trace,)
    loads: np.ndarray  # (ne, nW) load vectors (f, w)
    alpha_mode: str = "minimal"
    c: object = None
    operators: list = field(default_factory=list, repr=False)
    info: dict = field(default_factory=dict)

    def local_trace(self, e):
        idx, sg = self.spaces.trace_dofs()
        return sg[e] * self.uhat[idx[e]]

    def to_json(self):
        return json.dumps({
            "schema_version": SCHEMA_VERSION,
            "kind": "diffusion",
            "family": self.spaces.family,
            "k": self.spaces.k,
            "alpha_mode": self.alpha_mode,
            "elements": [{"q": q.tolist(), "u": u.tolist(), "uhat": self.local_trace(e).tolist()}
                         for e, (q, u) in enumerate(zip(self.q, self.u))],
            "trace": self.uhat.tolist(),
        })


def _operators(spaces, c, alpha_mode):
    """One LocalOperatorSet per class (constant c) or per element (callable c)."""
    if callable(c):
        return [assemble_local_diffusion(spaces[e], c, alpha_mode, x0=spaces.offsets[e])
                for e in range(spaces.mesh.n_elements)], True
    return [assemble_local_diffusion(sp, c, alpha_mode) for sp in spaces.classes], False


def _loads(spaces, f):
    ne = spaces.mesh.n_elements
    F = np.zeros((ne, spaces.nW))
    if f is None:
        return F
    if np.isscalar(f):
        val = float(f)
        f = lambda x: np.full(x.shape[:-1], val)  # noqa: E731
    for c, idx in enumerate(spaces.groups):
        sp = spaces.classes[c]
        pts = spaces.offsets[idx, None, :] + (sp.xq @ sp.J.T)[None]
        fx = np.asarray(f(pts), dtype=float)
        F[idx] = (fx * sp.wq) @ sp.W_vals
    return F


def assemble_trace_system(spaces, ops, per_element, F, g):
    mesh = spaces.mesh
    idx, sg = spaces.trace_dofs()
    nM = spaces.nM
    n = spaces.n_trace
    rows, cols, vals = [], [], []
    load = np.zeros(n)
    ne = mesh.n_elements
    groups = [np.arange(ne)[e:e + 1] for e in range(ne)] if per_element else spaces.groups
    for gi, els in enumerate(groups):
        op = ops[gi]
        s = sg[els]
        data = s[:, :, None] * op.schur[None] * s[:, None, :]
        rows.append(np.repeat(idx[els], nM, axis=1).ravel())
        cols.append(np.tile(idx[els], (1, nM)).ravel())
        vals.append(data.ravel())
        np.add.at(load, idx[els].ravel(), (s * (F[els] @ op.load_flux.T)).ravel())
    K = sps.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    fixed = spaces.boundary_dofs()
    fixed_values = spaces.project_trace(g) if g is not None else np.zeros(n)
    fixed_values = np.asarray(fixed_values)[fixed] if g is not None else np.zeros(len(fixed))
    free = np.setdiff1d(np.arange(n), fixed)
    return TraceSystem(K, load, free, fixed, fixed_values)


def _g_callable(g):
    if g is None or callable(g):
        return g
    val = float(g)
    return lambda x: np.full(x.shape[:-1], val)


def solve_trace_system(ts, solver="direct", tol=1e-13):
    n = ts.matrix.shape[0]
    x = np.zeros(n)
    x[ts.fixed] = ts.fixed_values
    K = ts.matrix
    Kff = K[ts.free][:, ts.free].tocsc()
    rhs = ts.load[ts.free] - K[ts.free][:, ts.fixed] @ ts.fixed_values
    if len(ts.free) == 0:
        return x, {"solver": "none"}
    if solver == "direct":
        lu = spla.splu(Kff, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options={"SymmetricMode": True})
        d = lu.U.diagonal()
        if np.any(d <= 0):
            raise SolverError("condensed diffusion system is not positive definite")
        x[ts.free] = lu.solve(rhs)
        info = {"solver": "direct"}
    elif solver == "cg":
        diag = Kff.diagonal()
        if np.any(diag <= 0):
            raise SolverError("condensed diffusion system is not positive definite")
        M = sps.diags(1.0 / diag)
        it = [0]
        sol, flag = spla.cg(Kff, rhs, rtol=tol, atol=0.0, M=M, maxiter=10 * len(rhs),
                            callback=lambda _: it.__setitem__(0, it[0] + 1))
        if flag != 0:
            raise SolverError(f"CG did not converge (flag {flag})")
        x[ts.free] = sol
        info = {"solver": "cg", "iterations": it[0]}
    else:
        raise SolverError(f"unknown solver {solver!r}")
    return x, info


def solve_diffusion(mesh, family, k=None, c=None, f=None, g=None, alpha_mode="minimal", solver="direct"):
    spaces = family if isinstance(family, MeshSpaces) else MeshSpaces(mesh, family, k)
    ops, per_element = _operators(spaces, c, alpha_mode)
    F = _loads(spaces, f)
    g = _g_callable(g)
    ts = assemble_trace_system(spaces, ops, per_element, F, g)
    uhat, info = solve_trace_system(ts, solver)
    idx, sg = spaces.trace_dofs()
    ne = mesh.n_elements
    q = np.zeros((ne, spaces.nV))
    u = np.zeros((ne, spaces.nW))
    for e in range(ne):
        op = ops[e] if per_element else ops[spaces.cls[e]]
        x = op.solve_uhat @ (sg[e] * uhat[idx[e]]) + op.solve_load @ F[e]
        q[e], u[e] = x[: spaces.nV], x[spaces.nV:]
    sol = FieldSolution(spaces, q, u, uhat, F, alpha_mode, c, ops, info)
    sol.info["per_element"] = per_element
    sol.info["max_local_cond"] = max(op.cond for op in ops)
    return sol


def _op(sol, e):
    return sol.operators[e] if sol.info.get("per_element") else sol.operators[sol.spaces.cls[e]]


def element_fluxes(sol):
    """(ne, nM) local M coordinates of <qhat.n, mu>."""
    out = np.zeros((sol.spaces.mesh.n_elements, sol.spaces.nM))
    for e in range(len(out)):
        out[e] = numerical_flux(sol.spaces[e], _op(sol, e), sol.q[e], sol.u[e], sol.local_trace(e))
    return out


def conservation_check(sol, f=None):
    """max_K |<qhat.n, 1>_dK - (f, 1)_K|."""
    fl = element_fluxes(sol)
    worst = 0.0
    for e in range(len(fl)):
        sp = sol.spaces[e]
        F = sol.loads[e] if f is None else load_vector(sp, f, sol.spaces.offsets[e])
        worst = max(worst, abs(sp.m1 @ fl[e] - sp.w1 @ F))
    return worst


def residuals(sol):
    """Relative residuals of the local equations, the flux balance and the boundary condition."""
    sp_ = sol.spaces
    idx, sg = sp_.trace_dofs()
    local = 0.0
    scale = 0.0
    for e in range(sp_.mesh.n_elements):
        sp, op = sp_[e], _op(sol, e)
        uh = sol.local_trace(e)
        r1 = op.A @ sol.q[e] - sp.Dm @ sol.u[e] + sp.Cm @ uh
        r2 = sp.Dm.T @ sol.q[e] + sp.Tw.T @ op.alpha @ (sp.Tw @ sol.u[e] - uh) - sol.loads[e]
        local = max(local, np.abs(r1).max(), np.abs(r2).max())
        scale = max(scale, np.abs(sol.loads[e]).max(), np.abs(sp.Cm @ uh).max())
    fl = element_fluxes(sol)
    bal = np.zeros(sp_.n_trace)
    np.add.at(bal, idx.ravel(), (sg * fl).ravel())
    interior = np.setdiff1d(np.arange(sp_.n_trace), sp_.boundary_dofs())
    flux_res = np.abs(bal[interior]).max() if len(interior) else 0.0
    scale = max(scale, np.abs(fl).max(), 1e-300)
    return {"local": local / scale, "flux": flux_res / scale}


def energy_balance(sol):
    """(sum_K E_K, (f, u_h), boundary term <qhat.n, uhat> on the boundary)."""
    sp_ = sol.spaces
    E = 0.0
    fu = 0.0
    for e in range(sp_.mesh.n_elements):
        sp = sp_[e]
        x0 = sp_.offsets[e]
        E += local_energy(sp, sol.q[e], sol.u[e], sol.local_trace(e), sol.alpha_mode, sol.c, x0)
        fu += sol.loads[e] @ sol.u[e]
    idx, sg = sp_.trace_dofs()
    fl = element_fluxes(sol)
    bmask = np.zeros(sp_.n_trace, dtype=bool)
    bmask[sp_.boundary_dofs()] = True
    bd = 0.0
    for e in range(sp_.mesh.n_elements):
        m = bmask[idx[e]]
        bd += np.sum((fl[e] * sol.local_trace(e))[m])
    return E, fu, bd


def l2_errors(sol, u_exact, q_exact):
    """(||u - u_h||, ||q - q_h||) by element quadrature."""
    sp_ = sol.spaces
    pts = sp_.all_quad_points()
    eu = eq = 0.0
    for c, idx in enumerate(sp_.groups):
        sp = sp_.classes[c]
        P = pts[idx]
        du = np.asarray(u_exact(P)) - sol.u[idx] @ sp.W_vals.T
        qh = np.einsum("ea,pac->epc", sol.q[idx], sp.V_vals)
        dq = np.asarray(q_exact(P)) - qh
        eu += np.sum(du**2 * sp.wq)
        eq += np.sum(dq**2 * sp.wq[:, None])
    return float(np.sqrt(eu)), float(np.sqrt(eq))


def sine_problem():
    """u = sin(pi x) sin(pi y) with c = I: returns (u, q, f)."""
    pi = np.pi

    def u(x):
        return np.sin(pi * x[..., 0]) * np.sin(pi * x[..., 1])

    def q(x):
        return -pi * np.stack([np.cos(pi * x[..., 0]) * np.sin(pi * x[..., 1]),
                               np.sin(pi * x[..., 0]) * np.cos(pi * x[..., 1])], axis=-1)

    def f(x):
        return 2 * pi**2 * u(x)

    return u, q, f
