"""HDG for steady incompressible Navier-Stokes in gradient-velocity-pressure form.

Unknowns per element: the velocity gradient ``L`` (rows in V), the velocity
``u`` (components in W), the pressure ``p`` (in W) and, on faces, the velocity
trace ``uhat`` (components in M).  Convection uses the post-processed,
exactly divergence-free velocity ``beta`` in V*, upwind stabilization
``max(beta.n, 0)`` and minimal viscous stabilization ``nu/h P_MS``.

Static condensation keeps ``(uhat on interior faces, elementwise pressure
means, one multiplier for (p, 1) = 0)`` globally.  The nonlinear problem is
solved by Picard iteration with beta frozen within each linear solve.
"""

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .analysis import local_trace, seminorm_sq
from .errors import AssemblyError, ConstructionError, InvalidArgument, NonConvergence, SolverError
from .spaces import MeshSpaces, NSLocalSpaceSet

log = logging.getLogger(__name__)
SCHEMA_VERSION = 1


class _ClassData:
    """Static per-class matrices for the NS scheme."""

    def __init__(self, sp):
        self.sp = sp
        ns = NSLocalSpaceSet(sp)
        if ns.closure_residual() > 1e-10:
            raise ConstructionError("W(K) must be closed under differentiation")
        st = sp.pp
        self.st = st
        nW, nM = sp.nW, sp.nM
        self.Gr = [np.einsum("p,pa,pb->ab", sp.wq, sp.W_vals, sp.W_grad[:, :, i]) for i in range(2)]
        face_of = np.repeat(np.arange(sp.nfaces), sp.k + 1)
        self.N = [sp.normals[face_of, i] for i in range(2)]
        self.Nn = [sp.Tw.T * self.N[i][None, :] for i in range(2)]  # <n_i mu_m, w_a>
        self.tauP = sp.P_Ms / sp.h
        self.Suu = sp.Tw.T @ self.tauP @ sp.Tw
        self.Suh = sp.Tw.T @ self.tauP
        # post-processing: rows (beta, vt) = (u, vt) for vt in Vt*, <beta.n, mu> = <uhat.n, mu>
        Gs = [np.einsum("p,ps,pb->sb", sp.wq, st.V_vals[:, :, i], sp.W_vals) for i in range(2)]
        Pm = np.vstack([st.Vt.T, st.Cm.T])
        if Pm.shape[0] != st.nV or np.linalg.matrix_rank(Pm) < st.nV:
            raise ConstructionError("post-processing system is singular")
        rhs = np.zeros((st.nV, 2 * nW + 2 * nM))
        nt = st.Vt.shape[1]
        for i in range(2):
            rhs[:nt, i * nW:(i + 1) * nW] = st.Vt.T @ Gs[i]
            rhs[nt:, 2 * nW + i * nM:2 * nW + (i + 1) * nM] = np.diag(self.N[i])
        self.Ph = np.linalg.solve(Pm, rhs)
        self.sqrt_area = math.sqrt(sp.area)


@dataclass
class NSFieldSolution:
    spaces: MeshSpaces
    nu: float
    L: np.ndarray  # (ne, 2, nV)
    u: np.ndarray  # (ne, 2, nW)
    p: np.ndarray  # (ne, nW)
    uhat: np.ndarray  # (n_trace, 2)
    beta: np.ndarray  # (ne, nVstar), convective velocity used in the solve
    multiplier: float = 0.0
    loads: np.ndarray | None = None
    trace: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def uhat_local(self):
        return local_trace(self.spaces, self.uhat)  # (ne, 2, nM)

    def to_json(self):
        return json.dumps({
            "schema_version": SCHEMA_VERSION,
            "kind": "navier-stokes",
            "family": self.spaces.family,
            "k": self.spaces.k,
            "nu": self.nu,
            "elements": [{"L": self.L[e].tolist(), "u": self.u[e].tolist(), "p": self.p[e].tolist(),
                          "uhat": self.uhat_local[e].tolist(), "beta": self.beta[e].tolist()}
                         for e in range(len(self.u))],
            "trace": self.uhat.tolist(),
            "iterations": self.trace,
        })

    def copy_fields(self):
        return {k: np.array(getattr(self, k)) for k in ("L", "u", "p", "uhat")}


@dataclass
class OseenSystem:
    matrix: sps.csr_matrix
    rhs: np.ndarray
    free: np.ndarray
    fixed: np.ndarray
    fixed_values: np.ndarray
    local: list  # per class: (els, Xh, Xf, K, Rh_loc, Rf_loc)
    n_trace: int


class NSDiscretization:
    """Navier-Stokes HDG scheme on a mesh for one space family."""

    def __init__(self, mesh, family="HDG", k=1):
        self.spaces = family if isinstance(family, MeshSpaces) else MeshSpaces(mesh, family, k)
        self.mesh = self.spaces.mesh
        self.data = [_ClassData(sp) for sp in self.spaces.classes]
        sp = self.spaces.classes[0]
        self.nV, self.nW, self.nM = sp.nV, sp.nW, sp.nM
        self.nS = sp.pp.nV
        self.nL = 2 * self.nV + 2 * self.nW + self.nW - 1

    # -- blocks ----------------------------------------------------------------
    def _iL(self, i):
        return slice(i * self.nV, (i + 1) * self.nV)

    def _iu(self, i):
        o = 2 * self.nV
        return slice(o + i * self.nW, o + (i + 1) * self.nW)

    @property
    def _ip(self):
        return slice(2 * self.nV + 2 * self.nW, self.nL)

    # -- data --------------------------------------------------------------------
    def loads(self, f):
        ne = self.mesh.n_elements
        F = np.zeros((ne, 2, self.nW))
        if f is None:
            return F
        pts = self.spaces.all_quad_points()
        for c, idx in enumerate(self.spaces.groups):
            sp = self.spaces.classes[c]
            fx = np.asarray(f(pts[idx]), dtype=float)  # (e, q, 2)
            F[idx] = np.einsum("p,pa,epi->eia", sp.wq, sp.W_vals, fx)
        return F

    def boundary_values(self, g):
        n = self.spaces.n_trace
        if g is None:
            return np.zeros((n, 2))
        return np.asarray(self.spaces.project_trace(g)).reshape(n, 2)

    def postprocess(self, u, uhat):
        """beta = P_h(u, uhat) in V* coordinates (ne, nS)."""
        uhl = local_trace(self.spaces, uhat)
        beta = np.zeros((self.mesh.n_elements, self.nS))
        for c, idx in enumerate(self.spaces.groups):
            x = np.concatenate([u[idx].reshape(len(idx), -1), uhl[idx].reshape(len(idx), -1)], axis=1)
            beta[idx] = x @ self.data[c].Ph.T
        return beta

    def convection(self, c, beta):
        """Per-element convective blocks for one class."""
        d = self.data[c]
        sp, st = d.sp, d.st
        bq = np.einsum("es,psc->epc", beta, st.V_vals)
        Cv = -np.einsum("p,pb,epc,pac->eab", sp.wq, sp.W_vals, bq, sp.W_grad)
        bn = np.einsum("es,fps->efp", beta, st.V_n)
        ac = np.maximum(bn, 0.0)
        am = bn - ac
        Fuu = np.einsum("fp,efp,fpa,fpb->eab", sp.wf, ac, sp.W_face, sp.W_face)
        Fuh = np.einsum("fp,efp,fpa,fpm->eam", sp.wf, am, sp.W_face, sp.M_face)
        Ec = np.einsum("fp,efp,fpm,fpb->emb", sp.wf, ac, sp.M_face, sp.W_face)
        Hm = np.einsum("fp,efp,fpm,fpn->emn", sp.wf, am, sp.M_face, sp.M_face)
        return Cv, Fuu, Fuh, Ec, Hm

    def local_blocks(self, c, beta, nu, F):
        """Local matrices K (e, nL, nL), trace/load right-hand sides and face-residual operators."""
        d = self.data[c]
        sp = d.sp
        ne = len(beta)
        nV, nW, nM, nL = self.nV, self.nW, self.nM, self.nL
        Cv, Fuu, Fuh, Ec, Hm = self.convection(c, beta)
        K = np.zeros((ne, nL, nL))
        Rh = np.zeros((ne, nL, 2 * nM))
        Rf = np.zeros((ne, nL))
        RX = np.zeros((ne, 2 * nM, nL))
        Rhh = np.zeros((ne, 2 * nM, 2 * nM))
        Rp0 = np.zeros((2 * nM,))
        ip = self._ip
        for i in range(2):
            iL, iu = self._iL(i), self._iu(i)
            ih = slice(i * nM, (i + 1) * nM)
            K[:, iL, iL] = nu * np.eye(nV)
            K[:, iL, iu] = nu * sp.Dm
            K[:, iu, iL] = -nu * sp.Dm.T
            K[:, iu, iu] = nu * d.Suu + Cv + Fuu
            K[:, iu, ip] = d.Gr[i][:, 1:]
            K[:, ip, iu] = -d.Gr[i].T[1:, :]
            Rh[:, iL, ih] = nu * sp.Cm
            Rh[:, iu, ih] = nu * d.Suh - Fuh
            Rh[:, ip, ih] = -d.Nn[i][1:, :]
            Rf[:, iu] = F[:, i]
            RX[:, ih, iL] = -nu * sp.Cm.T
            RX[:, ih, iu] = nu * d.tauP @ sp.Tw + Ec
            RX[:, ih, ip] = d.N[i][:, None] * sp.Tw[:, 1:]
            Rhh[:, ih, ih] = -nu * d.tauP + Hm
            Rp0[ih] = d.N[i] * sp.Tw[:, 0]
        return K, Rh, Rf, RX, Rhh, Rp0

    # -- assembly ----------------------------------------------------------------
    def assemble_oseen(self, nu, beta, F, gvals):
        spaces = self.spaces
        ne = self.mesh.n_elements
        nT = spaces.n_trace
        nM = self.nM
        idx, sg = spaces.trace_dofs()
        gidx = np.concatenate([idx, idx + nT], axis=1)  # (ne, 2nM)
        gsg = np.concatenate([sg, sg], axis=1)
        N = 2 * nT + ne + 1
        rows, cols, vals = [], [], []
        rhs = np.zeros(N)
        local = []
        for c, els in enumerate(spaces.groups):
            K, Rh, Rf, RX, Rhh, Rp0 = self.local_blocks(c, beta[els], nu, F[els])
            try:
                X = np.linalg.solve(K, np.concatenate([Rh, Rf[:, :, None]], axis=2))
            except np.linalg.LinAlgError as exc:
                raise AssemblyError("singular local Navier-Stokes solver") from exc
            if not np.all(np.isfinite(X)):
                raise AssemblyError("singular local Navier-Stokes solver")
            Xh, Xf = X[:, :, :-1], X[:, :, -1]
            local.append((els, Xh, Xf, K, Rh, Rf))
            Ahh = RX @ Xh + Rhh  # (e, 2nM, 2nM)
            bh = -np.einsum("eml,el->em", RX, Xf)
            s = gsg[els]
            data = s[:, :, None] * Ahh * s[:, None, :]
            gi = gidx[els]
            rows.append(np.repeat(gi, 2 * nM, axis=1).ravel())
            cols.append(np.tile(gi, (1, 2 * nM)).ravel())
            vals.append(data.ravel())
            np.add.at(rhs, gi.ravel(), (s * bh).ravel())
            # pressure means enter the face equations
            pcol = 2 * nT + els
            rows.append(gi.ravel())
            cols.append(np.repeat(pcol, 2 * nM))
            vals.append((s * Rp0[None, :]).ravel())
            # psi_0 rows: <uhat.n, psi_0> + lambda sqrt|K| = 0
            d = self.data[c]
            n0 = np.concatenate([d.Nn[0][0], d.Nn[1][0]])
            rows.append(np.repeat(pcol, 2 * nM))
            cols.append(gi.ravel())
            vals.append((s * n0[None, :]).ravel())
            rows.append(pcol)
            cols.append(np.full(len(els), N - 1))
            vals.append(np.full(len(els), d.sqrt_area))
            # mean constraint sum sqrt|K| pbar_K = 0
            rows.append(np.full(len(els), N - 1))
            cols.append(pcol)
            vals.append(np.full(len(els), d.sqrt_area))
        A = sps.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))
        bd = spaces.boundary_dofs()
        fixed = np.concatenate([bd, bd + nT])
        fixed_values = np.concatenate([gvals[bd, 0], gvals[bd, 1]])
        free = np.setdiff1d(np.arange(N), fixed)
        return OseenSystem(A, rhs, free, fixed, fixed_values, local, nT)

    def solve_oseen(self, system):
        A = system.matrix
        x = np.zeros(A.shape[0])
        x[system.fixed] = system.fixed_values
        Aff = A[system.free][:, system.free].tocsc()
        b = system.rhs[system.free] - A[system.free][:, system.fixed] @ system.fixed_values
        try:
            lu = spla.splu(Aff)
        except RuntimeError as exc:
            raise SolverError(f"Oseen factorization failed: {exc}") from exc
        x[system.free] = lu.solve(b)
        if not np.all(np.isfinite(x)):
            raise SolverError("Oseen solve produced non-finite values")
        return x

    def recover(self, system, x):
        nT = system.n_trace
        ne = self.mesh.n_elements
        uhat = np.stack([x[:nT], x[nT:2 * nT]], axis=1)
        pbar = np.array(x[2 * nT:2 * nT + ne])
        # constants are in the kernel of all element and interior-face rows:
        # remove the round-off in (p, 1) exactly
        w0 = np.array([sp.w1[0] for sp in self.spaces.classes])[self.spaces.cls]
        pbar -= w0 * (w0 @ pbar) / (w0 @ w0)
        lam = x[-1]
        uhl = local_trace(self.spaces, uhat).reshape(ne, -1)
        L = np.zeros((ne, 2, self.nV))
        u = np.zeros((ne, 2, self.nW))
        p = np.zeros((ne, self.nW))
        for els, Xh, Xf, *_ in system.local:
            X = np.einsum("elm,em->el", Xh, uhl[els]) + Xf
            for i in range(2):
                L[els, i] = X[:, self._iL(i)]
                u[els, i] = X[:, self._iu(i)]
            p[els, 0] = pbar[els]
            p[els, 1:] = X[:, self._ip]
        return L, u, p, uhat, lam

    def oseen(self, nu, beta, F, gvals):
        system = self.assemble_oseen(nu, beta, F, gvals)
        x = self.solve_oseen(system)
        L, u, p, uhat, lam = self.recover(system, x)
        sol = NSFieldSolution(self.spaces, nu, L, u, p, uhat, beta, lam, F)
        sol.info["system"] = system
        sol.info["x"] = x
        return sol

    # -- diagnostics ---------------------------------------------------------------
    def h1_norm(self, u, uhat):
        return _triple(self.spaces, u, local_trace(self.spaces, uhat), "H1")

    def energy(self, sol):
        """nu ||L||^2 + nu/h ||P_MS(u - uhat)||^2 (orthonormal coordinates)."""
        uhl = sol.uhat_local
        E = sol.nu * float(np.sum(sol.L**2))
        for c, els in enumerate(self.spaces.groups):
            sp = self.data[c].sp
            jump = np.einsum("ma,eia->eim", sp.Tw, sol.u[els]) - uhl[els]
            E += sol.nu / sp.h * float(np.sum(np.einsum("sm,eim->eis", sp.Ms, jump) ** 2))
        return E

    def beta_diagnostics(self, beta):
        """(max_K ||div beta||_K / ||beta||, max interior normal jump / max |beta.n|)."""
        spaces = self.spaces
        idx, sg = spaces.trace_dofs()
        coef = np.zeros((self.mesh.n_elements, self.nM))
        div = np.zeros(self.mesh.n_elements)
        bnorm = 0.0
        for c, els in enumerate(spaces.groups):
            st = self.data[c].st
            dv = beta[els] @ st.V_div.T
            div[els] = np.sqrt(dv**2 @ st.wq)
            coef[els] = beta[els] @ st.Cm
            bnorm += float(np.sum(beta[els] ** 2))
        bnorm = math.sqrt(bnorm)
        acc = np.zeros(spaces.n_trace)
        np.add.at(acc, idx.ravel(), (sg * coef).ravel())
        interior = np.setdiff1d(np.arange(spaces.n_trace), spaces.boundary_dofs())
        scale = max(np.abs(coef).max(), 1e-300)
        jump = float(np.abs(acc[interior]).max() / scale) if len(interior) else 0.0
        return float(div.max() / bnorm) if bnorm > 0 else 0.0, jump

    def pressure_mean(self, p):
        """(p, 1)_Omega."""
        return float(sum(np.sum(p[els] @ self.data[c].sp.w1) for c, els in enumerate(self.spaces.groups)))

    def incompressibility_residual(self, u, uhat):
        """max over elements and q in Q(K) of |-(u, grad q) + <uhat.n, q>|."""
        uhl = local_trace(self.spaces, uhat)
        worst = 0.0
        for c, els in enumerate(self.spaces.groups):
            d = self.data[c]
            r = sum(-np.einsum("ba,eb->ea", d.Gr[i], u[els, i]) + np.einsum("am,em->ea", d.Nn[i], uhl[els, i])
                    for i in range(2))
            worst = max(worst, float(np.abs(r).max()))
        return worst

    def residual(self, sol, f=None, g=None):
        """Relative residual of the full nonlinear scheme at a solution."""
        beta = self.postprocess(sol.u, sol.uhat)
        F = sol.loads if sol.loads is not None else self.loads(f)
        gvals = sol.uhat if g is None else self.boundary_values(g)
        system = self.assemble_oseen(sol.nu, beta, F, gvals)
        ne = self.mesh.n_elements
        nT = self.spaces.n_trace
        uhl = sol.uhat_local.reshape(ne, -1)
        worst = 0.0
        scale = 0.0
        for els, _, _, K, Rh, Rf in system.local:
            X = np.zeros((len(els), self.nL))
            for i in range(2):
                X[:, self._iL(i)] = sol.L[els, i]
                X[:, self._iu(i)] = sol.u[els, i]
            X[:, self._ip] = sol.p[els, 1:]
            r = np.einsum("elk,ek->el", K, X) - np.einsum("elm,em->el", Rh, uhl[els]) - Rf
            worst = max(worst, float(np.abs(r).max()))
            scale = max(scale, float(np.abs(Rf).max()), float(np.abs(np.einsum("elm,em->el", Rh, uhl[els])).max()))
        # face, pressure-mean and multiplier rows via the monolithic face operator
        x = np.concatenate([sol.uhat[:, 0], sol.uhat[:, 1], sol.p[:, 0], [sol.multiplier]])
        rg = self._face_residual(system, sol, x)
        worst = max(worst, rg)
        return worst / max(scale, 1e-300)

    def _face_residual(self, system, sol, x):
        """Residual of the face equations evaluated with the actual local fields."""
        spaces = self.spaces
        nT = spaces.n_trace
        ne = self.mesh.n_elements
        idx, sg = spaces.trace_dofs()
        gidx = np.concatenate([idx, idx + nT], axis=1)
        gsg = np.concatenate([sg, sg], axis=1)
        uhl = sol.uhat_local.reshape(ne, -1)
        acc = np.zeros(2 * nT)
        beta = self.postprocess(sol.u, sol.uhat)
        for c, els in enumerate(spaces.groups):
            _, _, _, RX, Rhh, Rp0 = self.local_blocks(c, beta[els], sol.nu, np.zeros((len(els), 2, self.nW)))
            X = np.zeros((len(els), self.nL))
            for i in range(2):
                X[:, self._iL(i)] = sol.L[els, i]
                X[:, self._iu(i)] = sol.u[els, i]
            X[:, self._ip] = sol.p[els, 1:]
            R = np.einsum("eml,el->em", RX, X) + np.einsum("emn,en->em", Rhh, uhl[els]) + Rp0[None] * sol.p[els, :1]
            np.add.at(acc, gidx[els].ravel(), (gsg[els] * R).ravel())
        free = system.free[system.free < 2 * nT]
        return float(np.abs(acc[free]).max()) if len(free) else 0.0


def _triple(spaces, u, uhl, mode):
    tot = 0.0
    for e in range(len(u)):
        sp = spaces[e]
        for i in range(u.shape[1]):
            tot += seminorm_sq(sp, u[e, i], uhl[e, i], mode)
    return math.sqrt(tot)


def _fu(F, u):
    return float(np.sum(F * u))


def solve_navier_stokes(mesh, family="HDG", k=1, nu=1.0, f=None, g=None, tol=1e-10, maxit=30,
                        relaxation=1.0, disc=None, energy_slack=1e-10, raise_on_failure=True):
    """Picard iteration F: (w, what) -> Oseen solve with beta = P_h(w, what).

    Returns the NSFieldSolution; its ``trace`` lists one dict per iterate with
    the increment norm, contraction ratio, energy and (f, u_h).
    """
    if not tol > 0:
        raise InvalidArgument("tol must be positive")
    if not 0 < relaxation <= 1:
        raise InvalidArgument("relaxation must lie in (0, 1]")
    if not nu > 0:
        raise InvalidArgument("nu must be positive")
    disc = disc or NSDiscretization(mesh, family, k)
    F = disc.loads(f)
    gvals = disc.boundary_values(g)
    ne = disc.mesh.n_elements
    omega = relaxation
    halvings = 0
    beta = np.zeros((ne, disc.nS))
    cur = None
    trace = []
    prev_inc = None
    converged = False
    for it in range(1, maxit + 1):
        div_b, jump_b = disc.beta_diagnostics(beta) if it > 1 else (0.0, 0.0)
        new = disc.oseen(nu, beta, F, gvals)
        E = disc.energy(new)
        fu = _fu(F, new.u)
        if cur is None:
            nxt = new
        else:
            nxt = NSFieldSolution(disc.spaces, nu,
                                  (1 - omega) * cur.L + omega * new.L,
                                  (1 - omega) * cur.u + omega * new.u,
                                  (1 - omega) * cur.p + omega * new.p,
                                  (1 - omega) * cur.uhat + omega * new.uhat,
                                  beta, (1 - omega) * cur.multiplier + omega * new.multiplier, F)
        du = nxt.u - (cur.u if cur is not None else 0.0)
        duh = nxt.uhat - (cur.uhat if cur is not None else 0.0)
        inc = disc.h1_norm(du, duh)
        size = disc.h1_norm(nxt.u, nxt.uhat)
        ratio = inc / prev_inc if prev_inc and prev_inc > 0 else None
        trace.append({"iterate": it, "increment": inc, "ratio": ratio, "energy": E, "f_u": fu,
                      "energy_ok": bool(E <= fu + energy_slack), "div_beta": div_b, "jump_beta": jump_b,
                      "omega": omega})
        log.info("picard %d: increment %.3e ratio %s", it, inc, "-" if ratio is None else f"{ratio:.3f}")
        cur = nxt
        if inc <= tol * size or inc == 0.0:
            converged = True
            break
        if ratio is not None and ratio >= 1 and halvings < 3:
            omega *= 0.5
            halvings += 1
        prev_inc = inc
        beta = disc.postprocess(cur.u, cur.uhat)
    cur.trace = trace
    cur.beta = disc.postprocess(cur.u, cur.uhat)
    cur.info["converged"] = converged
    cur.info["disc"] = disc
    if not converged and raise_on_failure:
        raise NonConvergence(f"Picard iteration did not converge in {maxit} iterations", trace)
    div_b, jump_b = disc.beta_diagnostics(cur.beta)
    cur.info.update(max_div_beta=div_b, beta_jump=jump_b,
                    pressure_mean=disc.pressure_mean(cur.p), p_norm=float(np.linalg.norm(cur.p)),
                    energy=disc.energy(cur), f_u=_fu(F, cur.u))
    cur.max_div_beta = div_b
    cur.energy = cur.info["energy"]
    return cur


def solve_stokes(mesh, family="HDG", k=1, nu=1.0, f=None, g=None, disc=None):
    """One Oseen solve with beta = 0."""
    if not nu > 0:
        raise InvalidArgument("nu must be positive")
    disc = disc or NSDiscretization(mesh, family, k)
    F = disc.loads(f)
    sol = disc.oseen(nu, np.zeros((disc.mesh.n_elements, disc.nS)), F, disc.boundary_values(g))
    sol.info["disc"] = disc
    sol.energy = disc.energy(sol)
    sol.max_div_beta = 0.0
    return sol


def ns_energy(sol, nu=None, disc=None):
    disc = disc or sol.info.get("disc") or NSDiscretization(sol.spaces.mesh, sol.spaces)
    if nu is not None and nu != sol.nu:
        sol = NSFieldSolution(sol.spaces, nu, sol.L, sol.u, sol.p, sol.uhat, sol.beta)
    return disc.energy(sol)


def postprocess_beta(disc, u, uhat):
    return disc.postprocess(u, uhat)


def convective_form(disc, beta, u, uhat_local, v, vhat_local):
    """O_h(beta; (u, uhat), (v, vhat)) evaluated from point values."""
    tot = 0.0
    for c, els in enumerate(disc.spaces.groups):
        d = disc.data[c]
        sp, st = d.sp, d.st
        bq = np.einsum("es,psc->epc", beta[els], st.V_vals)
        uq = np.einsum("eia,pa->epi", u[els], sp.W_vals)
        gv = np.einsum("eia,pad->epid", v[els], sp.W_grad)
        tot -= np.einsum("p,epi,epd,epid->", sp.wq, uq, bq, gv)
        bn = np.einsum("es,fps->efp", beta[els], st.V_n)
        uf = np.einsum("eia,fpa->efpi", u[els], sp.W_face)
        uhf = np.einsum("eim,fpm->efpi", uhat_local[els], sp.M_face)
        vf = np.einsum("eia,fpa->efpi", v[els], sp.W_face)
        vhf = np.einsum("eim,fpm->efpi", vhat_local[els], sp.M_face)
        flux = bn[..., None] * uhf + np.maximum(bn, 0)[..., None] * (uf - uhf)
        tot += np.einsum("fp,efpi,efpi->", sp.wf, flux, vf - vhf)
    return float(tot)


def upwind_identity_rhs(disc, beta, u, uhat_local):
    """1/2 <|beta.n| (u - uhat), u - uhat>."""
    tot = 0.0
    for c, els in enumerate(disc.spaces.groups):
        d = disc.data[c]
        sp, st = d.sp, d.st
        bn = np.einsum("es,fps->efp", beta[els], st.V_n)
        jump = np.einsum("eia,fpa->efpi", u[els], sp.W_face) - np.einsum("eim,fpm->efpi", uhat_local[els], sp.M_face)
        tot += 0.5 * np.einsum("fp,efp,efpi->", sp.wf, np.abs(bn), jump**2)
    return float(tot)


def incompressible_basis(disc):
    """Orthonormal basis (columns) of discrete incompressible pairs with zero boundary trace.

    Coordinates are [u (ne*2*nW), uhat interior (2 * n_interior)].  Dense; for small meshes.
    """
    spaces = disc.spaces
    ne = disc.mesh.n_elements
    nT = spaces.n_trace
    nW = disc.nW
    interior = np.setdiff1d(np.arange(nT), spaces.boundary_dofs())
    pos = -np.ones(nT, dtype=int)
    pos[interior] = np.arange(len(interior))
    nu_ = ne * 2 * nW
    ncol = nu_ + 2 * len(interior)
    A = np.zeros((ne * nW, ncol))
    idx, sg = spaces.trace_dofs()
    for e in range(ne):
        d = disc.data[spaces.cls[e]]
        for i in range(2):
            A[e * nW:(e + 1) * nW, (e * 2 + i) * nW:(e * 2 + i + 1) * nW] = -d.Gr[i].T
            for m in range(disc.nM):
                j = pos[idx[e, m]]
                if j >= 0:
                    A[e * nW:(e + 1) * nW, nu_ + i * len(interior) + j] += d.Nn[i][:, m] * sg[e, m]
    _, s, vt = np.linalg.svd(A, full_matrices=True)
    r = int(np.sum(s > 1e-12 * s[0]))
    return vt[r:].T, interior


def random_incompressible_pair(disc, rng, basis=None):
    Z, interior = basis if basis is not None else incompressible_basis(disc)
    x = Z @ rng.standard_normal(Z.shape[1])
    ne, nW = disc.mesh.n_elements, disc.nW
    u = x[: ne * 2 * nW].reshape(ne, 2, nW)
    uhat = np.zeros((disc.spaces.n_trace, 2))
    ni = len(interior)
    uhat[interior, 0] = x[ne * 2 * nW: ne * 2 * nW + ni]
    uhat[interior, 1] = x[ne * 2 * nW + ni:]
    return u, uhat


def oh_identity_test(disc, rng, n_pairs=20):
    """max relative discrepancy of O_h(beta; z, z) = 1/2 <|beta.n| jump, jump> over random pairs."""
    basis = incompressible_basis(disc)
    interior = basis[1]
    worst = 0.0
    for _ in range(n_pairs):
        w, what = random_incompressible_pair(disc, rng, basis)
        beta = disc.postprocess(w, what)
        v = rng.standard_normal((disc.mesh.n_elements, 2, disc.nW))
        vh = np.zeros((disc.spaces.n_trace, 2))
        vh[interior] = rng.standard_normal((len(interior), 2))
        vhl = local_trace(disc.spaces, vh)
        lhs = convective_form(disc, beta, v, vhl, v, vhl)
        rhs = upwind_identity_rhs(disc, beta, v, vhl)
        worst = max(worst, abs(lhs - rhs) / max(abs(rhs), 1e-300))
    return worst


# -- norms of beta and the bounds on the convective form --------------------------

class BetaLift:
    """Exact representation of beta components in a scalar space of one degree higher.

    V* is contained in the (k+1)-degree scalar space of the same shape, so each
    component of beta has W' coordinates and an exact facewise trace in M'.
    """

    def __init__(self, disc):
        self.disc = disc
        fam = "HDG" if disc.mesh.shape == "triangle" else "HDGQ"
        self.spaces = MeshSpaces(disc.mesh, fam, disc.spaces.k + 1)
        if not np.array_equal(self.spaces.cls, disc.spaces.cls):
            raise ConstructionError("element classes of the lifted spaces differ")
        self.maps = []
        for c, d in enumerate(disc.data):
            sq = self.spaces.classes[c]
            B = d.st.vector_values(sq.xq)  # (nq', nS, 2)
            P = np.einsum("p,pa,psi->isa", sq.wq, sq.W_vals, B)  # (2, nW', nS)
            back = np.einsum("pa,isa->psi", sq.W_vals, P)
            if np.abs(back - B).max() > 1e-10 * max(np.abs(B).max(), 1.0):
                raise ConstructionError("V* is not contained in the lifted scalar space")
            self.maps.append(P)

    def coords(self, beta):
        """(ne, 2, nW') coordinates of the components of beta."""
        out = np.zeros((len(beta), 2, self.spaces.nW))
        for c, els in enumerate(self.disc.spaces.groups):
            out[els] = np.einsum("isa,es->eia", self.maps[c], beta[els])
        return out

    def traces(self, coef):
        out = np.zeros((len(coef), 2, self.spaces.nM))
        for c, els in enumerate(self.spaces.groups):
            out[els] = np.einsum("ma,eia->eim", self.spaces.classes[c].Tw, coef[els])
        return out

    def average(self, tr):
        """Facewise average {beta} of the two one-sided traces (own trace on the boundary)."""
        idx, sg = self.spaces.trace_dofs()
        n = self.spaces.n_trace
        acc = np.zeros((n, 2))
        cnt = np.zeros(n)
        for i in range(2):
            np.add.at(acc[:, i], idx.ravel(), (sg * tr[:, i]).ravel())
        np.add.at(cnt, idx.ravel(), 1.0)
        acc /= cnt[:, None]
        return local_trace(self.spaces, acc)

    def norm(self, beta, mode="H1", average=True):
        coef = self.coords(beta)
        tr = self.average(self.traces(coef)) if average else np.zeros((len(beta), 2, self.spaces.nM))
        return _triple(self.spaces, coef, tr, mode)


def _sup(disc, u, uhat_local=None):
    """max |u_i| (and |uhat_i|) at quadrature points: a lower bound for the sup norm."""
    m = 0.0
    for c, els in enumerate(disc.spaces.groups):
        sp = disc.data[c].sp
        m = max(m, float(np.abs(np.einsum("eia,pa->epi", u[els], sp.W_vals)).max()))
        if uhat_local is not None:
            m = max(m, float(np.abs(np.einsum("eim,fpm->efpi", uhat_local[els], sp.M_face)).max()))
    return m


def _random_pair(disc, rng, interior):
    v = rng.standard_normal((disc.mesh.n_elements, 2, disc.nW))
    vh = np.zeros((disc.spaces.n_trace, 2))
    vh[interior] = rng.standard_normal((len(interior), 2))
    return v, vh


def convective_bound_ratios(disc, rng, n_samples=10):
    """Largest sampled ratios |O_h| / (product of norms) for the three Lipschitz-type bounds.

    a: |||(beta, {beta})|||_1 |||(u, uhat)|||_1 |||(v, vhat)|||_1
    b: ||beta||_inf |||(u, uhat)|||_0 |||(v, vhat)|||_1
    c: |||(beta - gamma, 0)|||_0 |||(u, uhat)|||_inf |||(v, vhat)|||_1
    Sup norms are sampled at quadrature points.
    """
    lift = BetaLift(disc)
    basis = incompressible_basis(disc)
    interior = basis[1]
    out = {"a": 0.0, "b": 0.0, "c": 0.0}
    for _ in range(n_samples):
        beta = disc.postprocess(*random_incompressible_pair(disc, rng, basis))
        gamma = disc.postprocess(*random_incompressible_pair(disc, rng, basis))
        u, uh = _random_pair(disc, rng, interior)
        v, vh = _random_pair(disc, rng, interior)
        uhl, vhl = local_trace(disc.spaces, uh), local_trace(disc.spaces, vh)
        O = abs(convective_form(disc, beta, u, uhl, v, vhl))
        dO = abs(convective_form(disc, beta, u, uhl, v, vhl) - convective_form(disc, gamma, u, uhl, v, vhl))
        v1 = _triple(disc.spaces, v, vhl, "H1")
        u1 = _triple(disc.spaces, u, uhl, "H1")
        u0 = _triple(disc.spaces, u, uhl, "L0")
        binf = max(float(np.abs(np.einsum("es,psc->epc", beta[els], disc.data[c].st.V_vals)).max())
                   for c, els in enumerate(disc.spaces.groups))
        out["a"] = max(out["a"], O / (lift.norm(beta, "H1") * u1 * v1))
        out["b"] = max(out["b"], O / (binf * u0 * v1))
        out["c"] = max(out["c"], dO / (lift.norm(beta - gamma, "L0", average=False) * _sup(disc, u, uhl) * v1))
    return out


def seminorm_gram(sp, mode="H1"):
    """Matrix of seminorm_sq on the stacked coordinates (w, what) of one scalar component."""
    Tw, h = sp.Tw, sp.h
    I_M = np.eye(sp.nM)
    if mode == "H1":
        return np.block([[sp.Gw + Tw.T @ Tw / h, -Tw.T / h], [-Tw / h, I_M / h]])
    if mode == "L0":
        return np.block([[np.eye(sp.nW) + h * Tw.T @ Tw, -h * Tw.T], [-h * Tw, 2 * h * I_M]])
    raise InvalidArgument(f"unsupported mode {mode!r}")


def ph_boundedness(disc):
    """Constants C_l with |||(P_h v, trace)|||_l <= C_l |||(v, vhat)|||_l for l in {0, 1}.

    The trace paired with P_h v is its own one-sided trace.  Generalized
    eigenvalues on the local coordinates (v_1, v_2, vhat_1, vhat_2), maximised
    over element classes.
    """
    from .verify import generalized_max_eig

    lift = BetaLift(disc)
    nW, nM = disc.nW, disc.nM
    # (w1, w2, what1, what2) -> blocks of component i
    sel = [np.r_[np.arange(nW) + i * nW, 2 * nW + np.arange(nM) + i * nM] for i in range(2)]
    n = 2 * (nW + nM)
    out = {"0": 0.0, "1": 0.0}
    for c, d in enumerate(disc.data):
        sp, sq = d.sp, lift.spaces.classes[c]
        Bc = np.einsum("isa,sx->iax", lift.maps[c], d.Ph)  # beta_i in W' coordinates
        for mode, key in (("L0", "0"), ("H1", "1")):
            G = seminorm_gram(sp, mode)
            Bm = np.zeros((n, n))
            for ix in sel:
                Bm[np.ix_(ix, ix)] += G
            Gq = seminorm_gram(sq, mode)
            A = np.zeros((n, n))
            for i in range(2):
                Z = np.vstack([Bc[i], sq.Tw @ Bc[i]])
                A += Z.T @ Gq @ Z
            out[key] = max(out[key], math.sqrt(generalized_max_eig(0.5 * (A + A.T), Bm, names=("P_h", mode))))
    return out
