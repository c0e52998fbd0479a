"""Seminorms, projections, manufactured problems and convergence tables."""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConstructionError, InvalidArgument

SATURATED = "saturated"
ORDER_FLOOR = 1e-13


# -- local seminorms --------------------------------------------------------

def seminorm_sq(sp, u, uhat, mode="H1"):
    """Squared local seminorm of a scalar pair (W coords, M coords)."""
    u = np.asarray(u, dtype=float)
    uhat = np.asarray(uhat, dtype=float)
    jump = sp.Tw @ u - uhat
    if mode == "H1":
        return float(u @ sp.Gw @ u + jump @ jump / sp.h)
    if mode == "PF":
        # orthonormal bases: the constant c has coordinates c * w1 and c * m1
        mean = sp.m1 @ uhat / sp.perimeter
        du = u - mean * sp.w1
        dh = uhat - mean * sp.m1
        return float(du @ du + sp.h * (dh @ dh))
    if mode == "L0":
        return float(u @ u + sp.h * (uhat @ uhat + jump @ jump))
    raise InvalidArgument(f"unknown seminorm {mode!r}")


def seminorms(sp, u, uhat, mode="H1"):
    return math.sqrt(seminorm_sq(sp, u, uhat, mode))


def triple_norm(spaces, u, uhat_local, mode="H1", elements=None):
    """Sum over components and elements; u (ne, d, nW) or (ne, nW), uhat_local matching (ne, [d,] nM)."""
    u = np.asarray(u)
    uh = np.asarray(uhat_local)
    if u.ndim == 2:
        u, uh = u[:, None], uh[:, None]
    els = range(len(u)) if elements is None else elements
    tot = 0.0
    for e in els:
        sp = spaces[e]
        for i in range(u.shape[1]):
            tot += seminorm_sq(sp, u[e, i], uh[e, i], mode)
    return math.sqrt(tot)


# -- projections -----------------------------------------------------------

def _vals(fun, pts):
    return np.asarray(fun(pts), dtype=float)


def project_W(spaces, fun):
    """L2 projection onto W_h, componentwise: (ne, [d,] nW)."""
    pts = spaces.all_quad_points()
    out = None
    for c, idx in enumerate(spaces.groups):
        sp = spaces.classes[c]
        v = _vals(fun, pts[idx])  # (ne_c, nq, ...)
        coef = np.einsum("p,pa,ep...->e...a", sp.wq, sp.W_vals, v)
        if out is None:
            out = np.zeros((spaces.mesh.n_elements,) + coef.shape[1:])
        out[idx] = coef
    return out


def project_V(spaces, fun):
    """L2 projection of a (..., d, 2) tensor (rows) or (..., 2) vector field onto V: (ne, [d,] nV)."""
    pts = spaces.all_quad_points()
    out = None
    for c, idx in enumerate(spaces.groups):
        sp = spaces.classes[c]
        v = _vals(fun, pts[idx])
        coef = np.einsum("p,pac,ep...c->e...a", sp.wq, sp.V_vals, v)
        if out is None:
            out = np.zeros((spaces.mesh.n_elements,) + coef.shape[1:])
        out[idx] = coef
    return out


def project_M_local(spaces, fun):
    """Elementwise L2(dK) projection onto M(dK): (ne, [d,] nM) local coordinates."""
    pts = spaces.all_face_points()
    out = None
    for c, idx in enumerate(spaces.groups):
        sp = spaces.classes[c]
        v = _vals(fun, pts[idx])  # (ne_c, nf, nqf, ...)
        coef = np.einsum("fpm,fp,efp...->e...m", sp.M_face, sp.wf, v)
        if out is None:
            out = np.zeros((spaces.mesh.n_elements,) + coef.shape[1:])
        out[idx] = coef
    return out


def project_M(spaces, fun):
    """Global facewise L2 projection onto M_h, (n_trace, ...)."""
    return spaces.project_trace(fun)


def local_trace(spaces, uhat):
    """Global trace coefficients (n_trace, ...) -> local (ne, ..., nM)."""
    idx, sg = spaces.trace_dofs()
    loc = np.asarray(uhat)[idx]  # (ne, nM, ...)
    loc = loc * sg.reshape(sg.shape + (1,) * (loc.ndim - 2))
    return np.moveaxis(loc, 1, -1)


def piV_matrix(sp):
    """Square system of the projection Pi_V in W coordinates."""
    A = np.vstack([sp.Wt.T, sp.Ms @ sp.Tw])
    if A.shape[0] != sp.nW or np.linalg.matrix_rank(A) < sp.nW:
        raise ConstructionError("Pi_V system is not square and invertible")
    return A


def project_piV(spaces, fun):
    """Pi_V u: (Pi u, w) = (u, w) on div V and <Pi u, mu> = <u, mu> on M_S, componentwise."""
    Pw = project_W(spaces, fun)
    Pm = project_M_local(spaces, fun)
    out = np.zeros_like(Pw)
    for c, idx in enumerate(spaces.groups):
        sp = spaces.classes[c]
        A = piV_matrix(sp)
        rhs = np.concatenate([np.einsum("ab,e...a->e...b", sp.Wt, Pw[idx]),
                              np.einsum("sm,e...m->e...s", sp.Ms, Pm[idx])], axis=-1)
        out[idx] = np.einsum("ab,e...b->e...a", np.linalg.inv(A), rhs)
    return out


def l2_projections(spaces, L, u, p):
    """(P_G L, P_V u, P_Q p, P_M u); P_Q is adjusted to zero global mean."""
    PG = project_V(spaces, L)
    PV = project_W(spaces, u)
    PQ = project_W(spaces, p)
    PQ = mean_zero(spaces, PQ)
    PM = project_M(spaces, u)
    return PG, PV, PQ, PM


def mean_zero(spaces, p):
    w1 = np.array([sp.w1 for sp in spaces.classes])[spaces.cls]
    area = spaces.areas().sum()
    mean = np.sum(w1 * p) / area
    # W coordinates of the constant function 1 are w1
    return p - mean * w1


def pressure_mean(spaces, p):
    w1 = np.array([sp.w1 for sp in spaces.classes])[spaces.cls]
    return float(np.sum(w1 * p))


# -- manufactured problems ---------------------------------------------------

@dataclass
class Manufactured:
    name: str
    nu: float
    u: object
    L: object
    p: object
    f: object
    homogeneous: bool

    def convection(self, x):
        """(grad u) u, the convective part of f."""
        return np.einsum("...ij,...j->...i", self.L(x), self.u(x))

    def f_stokes(self, x):
        """Forcing of the Stokes problem with the same (u, p)."""
        return self.f(x) - self.convection(x)


def _trig(nu):
    pi = np.pi
    s, c = np.sin, np.cos

    def u(x):
        X, Y = pi * x[..., 0], pi * x[..., 1]
        return np.stack([-pi * s(X) ** 2 * s(2 * Y), pi * s(2 * X) * s(Y) ** 2], axis=-1)

    def L(x):
        X, Y = pi * x[..., 0], pi * x[..., 1]
        a = -pi**2 * s(2 * X) * s(2 * Y)
        b = -2 * pi**2 * s(X) ** 2 * c(2 * Y)
        d = 2 * pi**2 * c(2 * X) * s(Y) ** 2
        return np.stack([np.stack([a, b], -1), np.stack([d, -a], -1)], -2)

    def p(x):
        return c(pi * x[..., 0]) * c(pi * x[..., 1])

    def f(x):
        X, Y = pi * x[..., 0], pi * x[..., 1]
        lap1 = pi**3 * s(2 * Y) * (2 - 4 * c(2 * X))
        lap2 = pi**3 * s(2 * X) * (-2 + 4 * c(2 * Y))
        uu = u(x)
        G = L(x)
        conv = np.einsum("...ij,...j->...i", G, uu)
        gp = np.stack([-pi * s(X) * c(Y), -pi * c(X) * s(Y)], axis=-1)
        return -nu * np.stack([lap1, lap2], axis=-1) + conv + gp

    return Manufactured("trig", nu, u, L, p, f, True)


def _kovasznay(nu):
    Re = 1.0 / nu
    lam = Re / 2 - math.sqrt(Re**2 / 4 + 4 * math.pi**2)
    tp = 2 * math.pi
    pmean = (math.exp(2 * lam) - 1) / (4 * lam)

    def u(x):
        e = np.exp(lam * x[..., 0])
        return np.stack([1 - e * np.cos(tp * x[..., 1]), lam / tp * e * np.sin(tp * x[..., 1])], axis=-1)

    def L(x):
        e = np.exp(lam * x[..., 0])
        C, S = np.cos(tp * x[..., 1]), np.sin(tp * x[..., 1])
        r1 = np.stack([-lam * e * C, tp * e * S], -1)
        r2 = np.stack([lam**2 / tp * e * S, lam * e * C], -1)
        return np.stack([r1, r2], -2)

    def p(x):
        return -0.5 * np.exp(2 * lam * x[..., 0]) + pmean

    def f(x):
        return np.zeros(x.shape[:-1] + (2,))

    return Manufactured("kovasznay", nu, u, L, p, f, False)


def manufactured_problem(name, nu=1.0):
    if not nu > 0:
        raise InvalidArgument("nu must be positive")
    if name == "trig":
        return _trig(nu)
    if name == "kovasznay":
        return _kovasznay(nu)
    raise InvalidArgument(f"unknown manufactured problem {name!r}")


# -- error tables --------------------------------------------------------------

COLUMNS = ("err_L", "err_u", "err_p", "e_L", "e_u", "e_p", "e_H1", "e_PF_h", "e_L0",
           "max_div_beta", "energy")
# columns that are errors; orders are reported only for these
ORDER_COLUMNS = COLUMNS[:9]


@dataclass
class ErrorReport:
    rows: list = field(default_factory=list)
    columns: tuple = COLUMNS
    meta: dict = field(default_factory=dict)

    def add(self, row):
        self.rows.append(row)

    def orders(self):
        return observed_orders(self.rows, [c for c in self.columns if c in ORDER_COLUMNS])


def _l2_field(spaces, exact, coef, kind):
    pts = spaces.all_quad_points()
    tot = 0.0
    for c, idx in enumerate(spaces.groups):
        sp = spaces.classes[c]
        ex = _vals(exact, pts[idx])
        if kind == "W":
            ap = np.einsum("e...a,pa->ep...", coef[idx], sp.W_vals)
        else:
            ap = np.einsum("e...a,pac->ep...c", coef[idx], sp.V_vals)
        d = (ex - ap).reshape(len(idx), len(sp.wq), -1)
        tot += np.einsum("p,epk->", sp.wq, d**2)
    return math.sqrt(tot)


def error_report(spaces, sol, problem, k=None):
    """One row of the error table for a Navier-Stokes solution."""
    PG = project_V(spaces, problem.L)
    PQ = mean_zero(spaces, project_W(spaces, problem.p))
    PM = project_M(spaces, problem.u)
    Pi = project_piV(spaces, problem.u)
    eL = PG - sol.L
    eu = Pi - sol.u
    ep = PQ - sol.p
    euh = local_trace(spaces, PM - sol.uhat)
    h = spaces.mesh.h
    row = {
        "h": h,
        "n_elements": spaces.mesh.n_elements,
        "n_trace_dofs": 2 * spaces.n_trace,
        "err_L": _l2_field(spaces, problem.L, sol.L, "V"),
        "err_u": _l2_field(spaces, problem.u, np.asarray(sol.u), "W"),
        "err_p": _l2_field(spaces, problem.p, sol.p, "W"),
        "e_L": float(np.linalg.norm(eL)),
        "e_u": float(np.linalg.norm(eu)),
        "e_p": float(np.linalg.norm(ep)),
        "e_H1": triple_norm(spaces, eu, euh, "H1"),
        "e_PF_h": triple_norm(spaces, eu, euh, "PF") / h,
        "e_L0": triple_norm(spaces, eu, euh, "L0"),
        "max_div_beta": float(getattr(sol, "max_div_beta", 0.0)),
        "energy": float(getattr(sol, "energy", 0.0)),
    }
    return row


def observed_orders(rows, columns=ORDER_COLUMNS):
    """Per adjacent pair log2(e_coarse / e_fine); 'saturated' when either error is tiny."""
    out = []
    for a, b in zip(rows[:-1], rows[1:]):
        o = {}
        ratio = a["h"] / b["h"] if "h" in a and "h" in b else 2.0
        for col in columns:
            if col not in a or col not in b:
                continue
            ea, eb = a[col], b[col]
            if ea <= ORDER_FLOOR or eb <= ORDER_FLOOR:
                o[col] = SATURATED
            else:
                o[col] = math.log(ea / eb) / math.log(ratio)
        out.append(o)
    return out


def theta_ns(spaces, problem, samples=None):
    """Theta_ns and the sampled sup norm of u (a lower bound)."""
    nu = problem.nu
    PG = project_V(spaces, problem.L)
    PQ = mean_zero(spaces, project_W(spaces, problem.p))
    PM = project_M(spaces, problem.u)
    Pi = project_piV(spaces, problem.u)
    fpts = spaces.all_face_points()
    vpts = spaces.all_quad_points()
    tot = 0.0
    l0 = 0.0
    umax = float(np.abs(problem.u(np.concatenate([vpts.reshape(-1, 2), spaces.mesh.vertices]))).max())
    PMl = local_trace(spaces, PM)
    for c, idx in enumerate(spaces.groups):
        sp = spaces.classes[c]
        P = fpts[idx]
        Lx = problem.L(P)  # (e, f, q, 2, 2)
        Lh = np.einsum("eia,fpac->efpic", PG[idx], _face_vec(sp))
        dLn = np.einsum("efpij,fj->efpi", Lx - Lh, sp.normals)
        dp = problem.p(P) - np.einsum("ea,fpa->efp", PQ[idx], sp.W_face)
        tot += nu**2 * sp.h * np.einsum("fp,efpi->", sp.wf, dLn**2) + sp.h * np.einsum("fp,efp->", sp.wf, dp**2)
        # delta_u = u - Pi_V u, delta_uhat = u - P_M u
        V = vpts[idx]
        du = problem.u(V) - np.einsum("eia,pa->epi", Pi[idx], sp.W_vals)
        l0 += np.einsum("p,epi->", sp.wq, du**2)
        uf = problem.u(P)
        duh = uf - np.einsum("eim,fpm->efpi", PMl[idx], sp.M_face)
        jmp = np.einsum("eia,fpa->efpi", Pi[idx], sp.W_face) - np.einsum("eim,fpm->efpi", PMl[idx], sp.M_face)
        l0 += sp.h * (np.einsum("fp,efpi->", sp.wf, duh**2) + np.einsum("fp,efpi->", sp.wf, jmp**2))
    return tot + umax**2 * l0, umax


def _face_vec(sp):
    """Physical values of the V basis at face quadrature points (nf, nqf, nV, 2)."""
    return np.stack([sp.vector_values(x) for x in sp.xf])


def piV_ratio(spaces, fun):
    """max_K ||Pi_V u - u|| / (||P_V u - u|| + h^1/2 ||P_V u - u||_dK) for a scalar u."""
    Pi = project_piV(spaces, fun)
    Pw = project_W(spaces, fun)
    vpts = spaces.all_quad_points()
    fpts = spaces.all_face_points()
    worst = 0.0
    for c, idx in enumerate(spaces.groups):
        sp = spaces.classes[c]
        ex = fun(vpts[idx])
        exf = fun(fpts[idx])
        a = np.sqrt(np.einsum("p,ep->e", sp.wq, (ex - Pi[idx] @ sp.W_vals.T) ** 2))
        b = np.sqrt(np.einsum("p,ep->e", sp.wq, (ex - Pw[idx] @ sp.W_vals.T) ** 2))
        bf = np.sqrt(np.einsum("fp,efp->e", sp.wf, (exf - np.einsum("ea,fpa->efp", Pw[idx], sp.W_face)) ** 2))
        worst = max(worst, float(np.max(a / (b + np.sqrt(sp.h) * bf))))
    return worst
