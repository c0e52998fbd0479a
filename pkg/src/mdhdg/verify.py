"""Numerical certification of M-decompositions and discrete H1/PF constants."""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import IllConditionedMaterial, TheoremViolation

TOL = 1e-9
RANK_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    passed: bool
    residual: float
    constant: float | None = None

    def to_dict(self):
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d


@dataclass
class VerificationReport:
    family: str
    k: int
    checks: list = field(default_factory=list)
    C_H1: float | None = None
    C_PF: float | None = None

    def __getitem__(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    @property
    def max_residual(self):
        return max((c.residual for c in self.checks), default=0.0)

    def to_json(self):
        """One object per check with fields name, pass, residual, constant."""
        rows = [dict(c.to_dict(), family=self.family, k=self.k) for c in self.checks]
        for name, val in (("C_H1", self.C_H1), ("C_PF", self.C_PF)):
            if val is not None:
                rows.append({"name": name, "pass": bool(np.isfinite(val)), "residual": 0.0,
                             "constant": val, "family": self.family, "k": self.k})
        return json.dumps(rows, indent=1)


def _rel(res2, ref2):
    return float(np.sqrt(res2 / ref2)) if ref2 > 0 else float(np.sqrt(res2))


def _rank_defect(A, tol=RANK_TOL):
    """(number of missing directions for a square isomorphism, sigma_min/sigma_max)."""
    m, n = A.shape
    if m == 0 and n == 0:
        return 0, 1.0
    if min(m, n) == 0:
        return max(m, n), 0.0
    s = np.linalg.svd(A, compute_uv=False)
    r = int(np.sum(s > tol * s[0])) if s[0] > 0 else 0
    return (m - r) + (n - r), float(s[-1] / s[0]) if s[0] > 0 else 0.0


def check_trace(sp):
    """(a): normal traces of V and traces of W lie in M(dK)."""
    rV = sp.V_n - np.einsum("fpm,am->fpa", sp.M_face, sp.Cm)
    rW = sp.W_face - np.einsum("fpm,mb->fpb", sp.M_face, sp.Tw)
    num = np.einsum("fp,fpa->a", sp.wf, rV**2).sum() + np.einsum("fp,fpb->b", sp.wf, rW**2).sum()
    den = np.einsum("fp,fpa->", sp.wf, sp.V_n**2) + np.einsum("fp,fpb->", sp.wf, sp.W_face**2)
    res = _rel(num, den)
    return CheckResult("(a) trace in M", res <= TOL, res)


def check_containment(sp):
    """(b): grad W in Vt and div V in Wt (explicit residual functions)."""
    coords = sp.Vt @ (sp.Vt.T @ sp.gradW_in_V)
    r1 = sp.W_grad - np.einsum("pac,ab->pbc", sp.V_vals, coords)
    n1 = np.einsum("p,pbc,pbc->", sp.wq, r1, r1)
    d1 = np.einsum("p,pbc,pbc->", sp.wq, sp.W_grad, sp.W_grad)
    wc = sp.Wt @ (sp.Wt.T @ sp.Dm.T)
    r2 = sp.V_div - sp.W_vals @ wc
    n2 = np.einsum("p,pa,pa->", sp.wq, r2, r2)
    d2 = np.einsum("p,pa,pa->", sp.wq, sp.V_div, sp.V_div)
    res = max(_rel(n1, d1), _rel(n2, d2))
    return CheckResult("(b) containment", res <= TOL, res)


def trace_isomorphism_matrix(sp):
    """Trace map on Vt_perp x Wt_perp in M coordinates, columns scaled by h^(1/2)."""
    return np.sqrt(sp.h) * np.hstack([sp.Cm.T @ sp.Vtp, sp.Tw @ sp.Wtp])


def check_isomorphism(sp):
    """(c): trace map Vt_perp x Wt_perp -> M(dK) is an isomorphism."""
    defect, ratio = _rank_defect(trace_isomorphism_matrix(sp))
    return CheckResult("(c) isomorphism", defect == 0, float(defect), ratio)


def check_divfree_traces(sp):
    """Normal traces of divergence-free V fill the mean-zero subspace of M(dK)."""
    Z = sp.divfree()
    N = sp.Cm.T @ Z
    if N.shape[1] == 0:
        mean_res = 0.0
        rank = 0
    else:
        nrm = np.linalg.norm(N, axis=0)
        mean_res = float(np.max(np.abs(sp.m1 @ N) / (np.linalg.norm(sp.m1) * np.where(nrm > 0, nrm, 1.0))))
        s = np.linalg.svd(N, compute_uv=False)
        rank = int(np.sum(s > RANK_TOL * s[0])) if s[0] > 0 else 0
    defect = abs(rank - (sp.nM - 1))
    res = mean_res + defect
    return CheckResult("(d) div-free traces", res <= TOL, res)


def verify_ms_conditions(sp, ms_basis=None):
    """(e) dimension identity and (f) norm property of P_MS on traces of Wt_perp."""
    S = sp.Ms if ms_basis is None else np.atleast_2d(np.asarray(ms_basis, dtype=float))
    if ms_basis is not None and S.size == 0:
        S = np.zeros((0, sp.nM))
    dimWp = sp.nW - sp.dim_divV
    r_dim = abs(S.shape[0] - dimWp)
    a = CheckResult("(e) dim M_S", r_dim == 0, float(r_dim))
    if dimWp == 0:
        b = CheckResult("(f) M_S norm", True, 0.0, None)
    else:
        A = np.sqrt(sp.h) * (S @ sp.Tw @ sp.Wtp)
        s = np.linalg.svd(A, compute_uv=False) if A.size else np.zeros(0)
        smin = float(s[-1]) if s.size == dimWp else 0.0
        missing = dimWp - int(np.sum(s > RANK_TOL)) if s.size else dimWp
        b = CheckResult("(f) M_S norm", missing == 0, float(missing), smin)
    return [a, b]


def verify_mdecomposition(sp, constants=False):
    rep = VerificationReport(sp.family, sp.k)
    rep.checks += [check_trace(sp), check_containment(sp), check_isomorphism(sp), check_divfree_traces(sp)]
    rep.checks += verify_ms_conditions(sp)
    if constants and rep.passed:
        rep.C_H1, rep.C_PF = inequality_constants(sp)
    return rep


# -- Discrete H1 / Poincare-Friedrichs constants ---------------------------

@dataclass
class InequalityOperands:
    A_H1: np.ndarray
    A_PF: np.ndarray
    B: np.ndarray
    nW: int
    nM: int


def _material(sp, c):
    if c is None:
        c = np.eye(2)
    c = np.asarray(c, dtype=float)
    if c.ndim == 0:
        c = c * np.eye(2)
    if not np.allclose(c, c.T):
        raise IllConditionedMaterial("c must be symmetric")
    lam = np.linalg.eigvalsh(c)
    if lam[0] <= 0:
        raise IllConditionedMaterial("c must be positive definite")
    Ac = np.einsum("p,pac,cd,pbd->ab", sp.wq, sp.V_vals, c, sp.V_vals)
    try:
        np.linalg.cholesky(Ac)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedMaterial("c-weighted Gram of V(K) is singular") from exc
    return Ac, float(lam[-1])


def gradient_map(sp, c=None):
    """Matrix Q (nV, nW + nM): q = Q [u; uhat] solves (c q, v) = (u, div v) - <uhat, v.n>."""
    Ac, _ = _material(sp, c)
    return np.linalg.solve(Ac, np.hstack([sp.Dm, -sp.Cm]))


def inequality_operands(sp, c=None, ms_basis=None):
    Ac, lam = _material(sp, c)
    Q = np.linalg.solve(Ac, np.hstack([sp.Dm, -sp.Cm]))
    S = sp.Ms if ms_basis is None else ms_basis
    jump = np.hstack([sp.Tw, -np.eye(sp.nM)])  # M coords of u - uhat
    hinv = 1.0 / sp.h
    Bm = lam * Q.T @ Ac @ Q + hinv * (S @ jump).T @ (S @ jump)
    Z = np.zeros((sp.nW, sp.nM))
    A1 = np.block([[sp.Gw, Z], [Z.T, np.zeros((sp.nM, sp.nM))]]) + hinv * jump.T @ jump
    per = sp.perimeter
    # u - mean(uhat) in W coords and uhat - mean(uhat) in M coords
    L1 = np.hstack([np.eye(sp.nW), -np.outer(sp.w1, sp.m1) / per])
    L2 = np.hstack([np.zeros((sp.nM, sp.nW)), np.eye(sp.nM) - np.outer(sp.m1, sp.m1) / per])
    Apf = (L1.T @ L1 + sp.h * L2.T @ L2) / sp.h**2
    sym = lambda X: 0.5 * (X + X.T)  # noqa: E731
    return InequalityOperands(sym(A1), sym(Apf), sym(Bm), sp.nW, sp.nM)


def generalized_max_eig(A, Bm, kernel_tol=1e-12, check_tol=1e-9, names=("A", "B")):
    """Largest lambda of A x = lambda B x on range(B) after checking ker B in ker A."""
    lam, U = np.linalg.eigh(Bm)
    top = lam[-1]
    keep = lam > kernel_tol * top
    K = U[:, ~keep]
    if K.shape[1]:
        scale = max(np.linalg.norm(A, 2), 1e-300)
        res = np.linalg.norm(A @ K, 2) / scale
        if res > check_tol:
            raise TheoremViolation(f"ker {names[1]} is not contained in ker {names[0]} (residual {res:.3e})")
    R = U[:, keep] / np.sqrt(lam[keep])
    return float(np.linalg.eigvalsh(R.T @ A @ R)[-1])


def kernel_inclusion_residual(A, Bm, kernel_tol=1e-12):
    lam, U = np.linalg.eigh(Bm)
    K = U[:, lam <= kernel_tol * lam[-1]]
    if K.shape[1] == 0:
        return 0.0
    return float(np.linalg.norm(A @ K, 2) / max(np.linalg.norm(A, 2), 1e-300))


def inequality_constants(sp, c=None, ms_basis=None):
    """Sharp (C_H1, C_PF) on one element via generalized eigenproblems."""
    ops = inequality_operands(sp, c, ms_basis)
    c1 = generalized_max_eig(ops.A_H1, ops.B, names=("A_H1", "B"))
    c2 = generalized_max_eig(ops.A_PF, ops.B, names=("A_PF", "B"))
    return c1, c2


def global_inequality_quotients(spaces, c=None):
    """Sharp global (C_H1, C_PF) on a mesh: dense generalized eigenproblems.

    Unknowns are one scalar component (u per element, uhat on all faces); the
    forms are sums of the local operands, so each quotient is bounded by the
    largest local constant.  Meant for small meshes.
    """
    idx, sg = spaces.trace_dofs()
    ne, nW, nM = spaces.mesh.n_elements, spaces.nW, spaces.nM
    n = ne * nW + spaces.n_trace
    A1 = np.zeros((n, n))
    Apf = np.zeros((n, n))
    Bm = np.zeros((n, n))
    ops = [inequality_operands(sp, c) for sp in spaces.classes]
    for e in range(ne):
        op = ops[spaces.cls[e]]
        dof = np.r_[e * nW + np.arange(nW), ne * nW + idx[e]]
        s = np.r_[np.ones(nW), sg[e]]
        ix = np.ix_(dof, dof)
        S = np.outer(s, s)
        A1[ix] += S * op.A_H1
        Apf[ix] += S * op.A_PF
        Bm[ix] += S * op.B
    c1 = generalized_max_eig(A1, Bm, names=("A_H1", "B"))
    c2 = generalized_max_eig(Apf, Bm, names=("A_PF", "B"))
    return c1, c2


def seminorm_equivalence(sp):
    """Extreme generalized eigenvalues between A_H1 and A_PF on the complement of constants."""
    ops = inequality_operands(sp)
    lam, U = np.linalg.eigh(ops.A_PF)
    keep = lam > 1e-12 * lam[-1]
    R = U[:, keep] / np.sqrt(lam[keep])
    ev = np.linalg.eigvalsh(R.T @ ops.A_H1 @ R)
    return float(ev[0]), float(ev[-1])


def _sup_ratio(num, den):
    lam, U = np.linalg.eigh(den)
    keep = lam > 1e-12 * lam[-1]
    R = U[:, keep] / np.sqrt(lam[keep])
    return float(np.sqrt(max(np.linalg.eigvalsh(R.T @ num @ R)[-1], 0.0)))


def proof_constants(sp):
    """Scale-free diagnostics of the local inverse/trace/isomorphism constants."""
    h = sp.h
    out = {}
    out["C_gradW"] = h * _sup_ratio(sp.Gw, np.eye(sp.nW))
    out["C_divV"] = h * _sup_ratio(sp.Dm @ sp.Dm.T, np.eye(sp.nV))
    out["C_Vn"] = np.sqrt(h) * _sup_ratio(sp.Cm @ sp.Cm.T, np.eye(sp.nV))
    s = np.linalg.svd(trace_isomorphism_matrix(sp), compute_uv=False)
    out["C_M"] = float(1.0 / s[-1]) if s.size and s[-1] > 0 else np.inf
    if sp.Vtp.shape[1]:
        s = np.linalg.svd(np.sqrt(h) * sp.Cm.T @ sp.Vtp, compute_uv=False)
        out["C_Vt_perp"] = float(1.0 / s[-1]) if s[-1] > 0 else np.inf
    ms = verify_ms_conditions(sp)[1]
    out["C_MS"] = 1.0 / ms.constant if ms.constant else (0.0 if ms.passed else np.inf)
    out["C_K"] = max(out["C_gradW"], out["C_divV"], out["C_Vn"])
    return out
