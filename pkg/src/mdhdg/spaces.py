"""Local space families admitting M-decompositions on triangles and squares.

Every space is built from explicit polynomial generators on the reference
element and pulled back to a physical element through the affine map
``x = x0 + J xi``.  Scalars are composed with the map; vectors use the
contravariant map ``v = J v_ref`` (the determinant factor is dropped, it is a
constant and only rescales), so ``div_x v = div_xi v_ref`` and normal traces
stay polynomial.  All inner products and orthonormalisations are physical.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.polynomial import legendre as npleg

from . import basis as B
from .errors import ConstructionError, DecompositionError, InvalidArgument
from .mesh import REF_VERTICES

TRIANGLE_FAMILIES = ("RT", "HDG", "BDM")
SQUARE_FAMILIES = ("TNT", "HDGQ", "BDMQ")
FAMILIES = TRIANGLE_FAMILIES + SQUARE_FAMILIES
PP_FAMILY = {"RT": "RT", "HDG": "RT", "BDM": "BDM", "TNT": "TNT", "HDGQ": "TNT", "BDMQ": "BDMQ"}
MAX_K = 4
RANK_TOL = 1e-10


def family_shape(family):
    if family in TRIANGLE_FAMILIES:
        return "triangle"
    if family in SQUARE_FAMILIES:
        return "square"
    raise InvalidArgument(f"unknown space family {family!r}")


def parse_family(name):
    """Split tags like ``"RTk"``, ``"HDG1"`` or ``"TNT"`` into (family, k or None)."""
    name = str(name).strip()
    for fam in sorted(FAMILIES, key=len, reverse=True):
        if name.upper().startswith(fam):
            rest = name[len(fam):]
            if rest in ("", "k", "K", "_k"):
                return fam, None
            try:
                return fam, int(rest.lstrip("_"))
            except ValueError:
                break
    raise InvalidArgument(f"unknown space family {name!r}")


def _vec(scalars, comp):
    out = np.zeros((len(scalars), 2, B.NMON))
    out[:, comp] = scalars
    return out


def _pk2(kind, k):
    g = B.scalar_generators(kind, k)
    return np.concatenate([_vec(g, 0), _vec(g, 1)])


def _xi_times(scalars):
    # vector field xi * p for every scalar p
    return np.stack([B.mul_coord(scalars, 0), B.mul_coord(scalars, 1)], axis=1)


def _curl_bubbles(k):
    ps = np.array([B.monomial(k + 1, 1), B.monomial(1, k + 1)])
    return np.stack([B.curl(p) for p in ps])


def generators(family, k):
    """Reference generators ``(V (n, 2, NMON), W (m, NMON))`` of a family."""
    if family not in FAMILIES:
        raise InvalidArgument(f"unknown space family {family!r}")
    if not isinstance(k, (int, np.integer)) or k < 0 or k > MAX_K:
        raise InvalidArgument(f"degree k={k} outside 0..{MAX_K}")
    if family in ("BDM", "BDMQ") and k < 1:
        raise InvalidArgument(f"{family} needs k >= 1")
    if family == "RT":
        V = np.concatenate([_pk2("Pk", k), _xi_times(B.scalar_generators("homogeneous-Pk", k))])
        W = B.scalar_generators("Pk", k)
    elif family == "HDG":
        V, W = _pk2("Pk", k), B.scalar_generators("Pk", k)
    elif family == "BDM":
        V, W = _pk2("Pk", k), B.scalar_generators("Pk", k - 1)
    else:
        V = np.concatenate([_pk2("Qk", k), _curl_bubbles(k)])
        W = B.scalar_generators("Qk", k)
        if family == "TNT":
            V = np.concatenate([V, _xi_times(B.scalar_generators("homogeneous-Qk", k))])
        elif family == "BDMQ":
            top = B.monomial_index(k, k)
            W = W[W[:, top] == 0]
    return V, W


def legendre_face_values(k, t, length):
    """Orthonormal P_k basis on a face of ``length``; shape (len(t), k+1)."""
    V = npleg.legvander(2.0 * np.asarray(t) - 1.0, k)
    return V * np.sqrt((2 * np.arange(k + 1) + 1) / length)


class LocalSpaceSet:
    """Spaces V(K), W(K), M(dK), M_S(dK) and their tilde split on one element class.

    Bases of V and W are L2(K)-orthonormal; the trace basis is facewise
    orthonormal Legendre (local counter-clockwise parametrisation).  Subspaces
    (tilde spaces, complements, M_S) are stored as orthonormal coordinate
    matrices with respect to those bases.
    """

    def __init__(self, family, k, J, V_gen=None, W_gen=None, strict=True, qdeg=None, rank_tol=RANK_TOL, center=None):
        self.shape = family_shape(family) if V_gen is None else ("triangle" if family in TRIANGLE_FAMILIES else "square")
        if V_gen is None:
            V_gen, W_gen = generators(family, k)
        self.family = family
        self.k = int(k)
        self.strict = strict
        self.rank_tol = rank_tol
        self.J = np.array(J, dtype=float)
        self.detJ = float(np.linalg.det(self.J))
        if self.detJ <= 0:
            raise InvalidArgument("element map must preserve orientation")
        self.Jinv = np.linalg.inv(self.J)
        self.qdeg = qdeg if qdeg is not None else 3 * (self.k + 1) + 4

        ref = REF_VERTICES[self.shape]
        self.center = ref.mean(axis=0) if center is None else np.asarray(center, dtype=float)
        self.nfaces = len(ref)
        phys = ref @ self.J.T
        self.h = float(max(np.linalg.norm(a - b) for a in phys for b in phys))
        self.area = abs(self.detJ) * (0.5 if self.shape == "triangle" else 1.0)

        q = B.quadrature(self.shape, self.qdeg)
        self.xq = q.points
        self.wq = q.weights * abs(self.detJ)
        e = B.edge_quadrature(self.qdeg)
        self.tf = e.points
        self.lengths = np.array([np.linalg.norm(phys[(j + 1) % self.nfaces] - phys[j]) for j in range(self.nfaces)])
        self.wf = np.outer(self.lengths, e.weights)  # (nf, nqf)
        self.xf = np.array([ref[j] + np.outer(e.points, ref[(j + 1) % self.nfaces] - ref[j]) for j in range(self.nfaces)])
        tang = np.array([phys[(j + 1) % self.nfaces] - phys[j] for j in range(self.nfaces)]) / self.lengths[:, None]
        self.normals = np.column_stack([tang[:, 1], -tang[:, 0]])

        self.V_gen = B.BasisSet(self.shape, "vector", self.k, np.asarray(V_gen, dtype=float))
        self.W_gen = B.BasisSet(self.shape, "scalar", self.k, np.asarray(W_gen, dtype=float)[:, None, :])
        self._build_V()
        self._build_W()
        self._build_M()
        self._build_operators()
        self.tilde_split()
        self.build_stabilization_space()

    # -- tabulation -------------------------------------------------------
    def _local(self, pts):
        # generators are written in coordinates centred on the reference element
        return np.atleast_2d(pts) - self.center

    def _vec_values(self, gen, pts):
        return np.einsum("ij,pnj->pni", self.J, gen.values(self._local(pts)))

    def _build_V(self):
        vals = self._vec_values(self.V_gen, self.xq)
        T = B.orthonormalize(vals, self.wq, self.rank_tol)
        self.T_V = T
        self.nV = T.shape[0]
        self.V_vals = np.einsum("an,pnc->pac", T, vals)
        div = B.monomial_values(self._local(self.xq)) @ self.V_gen.divergence().T
        self.V_div = div @ T.T
        self.V_n = np.einsum("fpac,fc->fpa", np.stack([self.vector_values(x) for x in self.xf]), self.normals)

    def _build_W(self):
        vals = self.W_gen.values(self._local(self.xq))[:, :, 0]
        rank = np.linalg.matrix_rank(np.sqrt(self.wq)[:, None] * vals, tol=None)
        if rank < vals.shape[1]:
            T = B.orthonormalize(vals, self.wq, self.rank_tol)
        else:
            T = B.orthonormalize_ordered(vals, self.wq)
        self.T_W = T
        self.nW = T.shape[0]
        self.W_vals = vals @ T.T
        self.W_grad = self.scalar_gradients(self.xq)
        self.W_face = np.stack([self.scalar_values(x) for x in self.xf])

    def _build_M(self):
        k, nf = self.k, self.nfaces
        self.nM = nf * (k + 1)
        self.M_face = np.zeros((nf, len(self.tf), self.nM))
        for j in range(nf):
            self.M_face[j, :, j * (k + 1):(j + 1) * (k + 1)] = legendre_face_values(k, self.tf, self.lengths[j])

    def vector_values(self, pts):
        """Physical values (npts, nV, 2) at reference points."""
        return np.einsum("an,pnc->pac", self.T_V, self._vec_values(self.V_gen, pts))

    def scalar_values(self, pts):
        return self.W_gen.values(self._local(pts))[:, :, 0] @ self.T_W.T

    def scalar_gradients(self, pts):
        """Physical gradients (npts, nW, 2)."""
        g = self.W_gen.gradients(self._local(pts))[:, :, 0, :]
        g = np.einsum("ji,pnj->pni", self.Jinv, g)
        return np.einsum("an,pnd->pad", self.T_W, g)

    def face_trace(self, values):
        """M coordinates of face data sampled as (nf, nqf, ...)."""
        return np.einsum("fpm,fp,fp...->m...", self.M_face, self.wf, values)

    def to_physical(self, x0, pts):
        return np.asarray(x0) + np.atleast_2d(pts) @ self.J.T

    # -- operators --------------------------------------------------------
    def _build_operators(self):
        w = self.wq
        self.gram_V = np.einsum("p,pac,pbc->ab", w, self.V_vals, self.V_vals)
        self.gram_W = np.einsum("p,pa,pb->ab", w, self.W_vals, self.W_vals)
        self.Dm = np.einsum("p,pa,pb->ab", w, self.V_div, self.W_vals)  # (div v_a, w_b)
        self.Cm = self.face_trace(self.V_n).T  # <v_a . n, mu_m>, (nV, nM)
        self.Tw = self.face_trace(self.W_face)  # (nM, nW): M coords of traces of W
        self.Gw = np.einsum("p,pad,pbd->ab", w, self.W_grad, self.W_grad)
        # (grad w_b, v_a): V coordinates of grad W
        self.gradW_in_V = np.einsum("p,pac,pbc->ab", w, self.V_vals, self.W_grad)
        self.m1 = self.face_trace(np.ones((self.nfaces, len(self.tf))))
        self.w1 = self.W_vals.T @ w
        self.perimeter = float(self.lengths.sum())

    # -- tilde split ------------------------------------------------------
    def _orth_range(self, A):
        if A.size == 0 or A.shape[1] == 0:
            return np.zeros((A.shape[0], 0))
        u, s, _ = np.linalg.svd(A, full_matrices=False)
        if s.size == 0 or s[0] == 0:
            return np.zeros((A.shape[0], 0))
        return u[:, s > self.rank_tol * s[0]]

    @staticmethod
    def _complement(Q, n):
        if Q.shape[1] == 0:
            return np.eye(n)
        u, _, _ = np.linalg.svd(Q, full_matrices=True)
        return u[:, Q.shape[1]:]

    def divfree_bubbles(self):
        """V coordinates (nV, r) of {v : div v = 0, v.n = 0 on dK}."""
        rows = [self.h * np.sqrt(self.wq)[:, None] * self.V_div]
        rows.append(np.sqrt(self.h) * (np.sqrt(self.wf)[..., None] * self.V_n).reshape(-1, self.nV))
        A = np.vstack(rows)
        _, s, vt = np.linalg.svd(A, full_matrices=True)
        r = int(np.sum(s > self.rank_tol * s[0])) if s.size and s[0] > 0 else 0
        return vt[r:].T

    def divfree(self):
        """V coordinates (nV, r) of the divergence-free subspace of V."""
        A = self.h * np.sqrt(self.wq)[:, None] * self.V_div
        _, s, vt = np.linalg.svd(A, full_matrices=True)
        r = int(np.sum(s > self.rank_tol * s[0])) if s.size and s[0] > 0 else 0
        return vt[r:].T

    def tilde_split(self):
        """Coordinate bases of Vt, Wt and their L2(K)-orthogonal complements."""
        self.Vt = self._orth_range(np.hstack([self.gradW_in_V, self.divfree_bubbles()]))
        self.Vtp = self._complement(self.Vt, self.nV)
        self.Wt = self._orth_range(self.Dm.T)
        self.Wtp = self._complement(self.Wt, self.nW)
        if self.strict and self.Vtp.shape[1] + self.Wtp.shape[1] != self.nM:
            raise DecompositionError(
                f"{self.family}{self.k}: dim Vt_perp + dim Wt_perp = "
                f"{self.Vtp.shape[1] + self.Wtp.shape[1]} != dim M = {self.nM}"
            )
        return self.Vt, self.Wt, self.Vtp, self.Wtp

    @property
    def dim_divV(self):
        return self.Wt.shape[1]

    # -- stabilization space ----------------------------------------------
    def build_stabilization_space(self):
        """Orthonormal M coordinates (nMS, nM) of M_S and the face F*."""
        k = self.k
        defect = self.nW - self.dim_divV
        S = np.zeros((0, self.nM))
        face = None
        if defect > 0:
            if self.shape == "triangle":
                face = 1  # opposite local vertex 0
                S = np.zeros((k + 1, self.nM))
                S[:, face * (k + 1):(face + 1) * (k + 1)] = np.eye(k + 1)
            else:
                face = 0  # bottom face, span{s^k}, s the centred face coordinate
                blk = slice(face * (k + 1), (face + 1) * (k + 1))
                coef = (self.wf[face] * (self.tf - 0.5) ** k) @ self.M_face[face][:, blk]
                S = np.zeros((1, self.nM))
                S[0, blk] = coef / np.linalg.norm(coef)
        self.Ms = S
        self.Fstar = face
        if self.strict:
            from .verify import verify_ms_conditions

            rep = verify_ms_conditions(self)
            bad = [r for r in rep if not r.passed]
            if bad:
                raise ConstructionError(
                    f"{self.family}{self.k}: stabilization space fails " + ", ".join(r.name for r in bad)
                )
        return S, face

    @property
    def P_Ms(self):
        """L2(dK) projection onto M_S in M coordinates."""
        return self.Ms.T @ self.Ms

    # -- post-processing space --------------------------------------------
    @cached_property
    def pp(self):
        """The space V*(K) sharing W(K); checks V in V* and div V* = W."""
        fam = PP_FAMILY.get(self.family)
        if fam is None:
            raise ConstructionError("no post-processing space for custom generators")
        star = self if fam == self.family else get_local_spaces(fam, self.k, self.J)
        if star is not self:
            if star.nW != self.nW or np.abs(np.abs(np.linalg.svd(star.W_vals.T @ (self.wq[:, None] * self.W_vals), compute_uv=False)) - 1).max() > 1e-8:
                raise ConstructionError("V* does not share W(K)")
            # V subset V*: residual of projecting V onto V*
            P = np.einsum("p,pac,pbc->ab", self.wq, star.V_vals, self.V_vals)
            res = self.V_vals - np.einsum("ab,pac->pbc", P, star.V_vals)
            if np.sqrt(np.einsum("p,pbc,pbc->", self.wq, res, res)) > 1e-9 * np.sqrt(self.nV):
                raise ConstructionError("V(K) is not contained in V*(K)")
        if star.dim_divV != star.nW:
            raise ConstructionError("div V*(K) != W(K)")
        return star

    def summary(self):
        return {
            "family": self.family,
            "k": self.k,
            "shape": self.shape,
            "dim_V": self.nV,
            "dim_W": self.nW,
            "dim_M": self.nM,
            "dim_Ms": self.Ms.shape[0],
            "dim_Vt": self.Vt.shape[1],
            "dim_Vt_perp": self.Vtp.shape[1],
            "dim_Wt": self.Wt.shape[1],
            "dim_Wt_perp": self.Wtp.shape[1],
            "Fstar": self.Fstar,
        }


_CACHE = {}


def _key(family, k, J):
    return (family, int(k), tuple(np.round(np.asarray(J, dtype=float), 12).ravel()))


def get_local_spaces(family, k, J):
    """Cached LocalSpaceSet for one geometry class (family, k, map matrix)."""
    key = _key(family, k, J)
    sp = _CACHE.get(key)
    if sp is None:
        sp = LocalSpaceSet(family, k, J)
        _CACHE[key] = sp
    return sp


def build_local_spaces(family, k, element=None):
    """LocalSpaceSet on ``element`` (a RefElement or a 2x2 map matrix; default reference)."""
    fam, kk = parse_family(family) if isinstance(family, str) else (family, None)
    if kk is not None:
        k = kk
    shape = family_shape(fam)
    if element is None:
        J = np.eye(2)
    elif hasattr(element, "matrix"):
        if element.shape != shape:
            raise InvalidArgument(f"{fam} is defined on {shape}s, not {element.shape}s")
        J = element.matrix
    else:
        J = np.asarray(element, dtype=float)
    return get_local_spaces(fam, k, J)


def build_stabilization_space(spaces):
    return spaces.Ms, spaces.Fstar


def build_pp_space(spaces):
    return spaces.pp


def tilde_split(spaces):
    return spaces.Vt, spaces.Wt, spaces.Vtp, spaces.Wtp


def custom_spaces(V_gen, W_gen, k, shape="square", name="custom"):
    """Non-strict LocalSpaceSet from user generators (reference coordinates)."""
    fam = "HDGQ" if shape == "square" else "HDG"
    sp = LocalSpaceSet.__new__(LocalSpaceSet)
    LocalSpaceSet.__init__(sp, fam, k, np.eye(2), V_gen=V_gen, W_gen=W_gen, strict=False)
    sp.family = name
    return sp


@dataclass
class NSLocalSpaceSet:
    """Componentwise Navier-Stokes spaces built from one scalar LocalSpaceSet.

    Rows of the velocity gradient live in V, velocity components and the
    pressure in W, trace components in M; the convective velocity in V*.
    """

    scalar: LocalSpaceSet

    @property
    def star(self):
        return self.scalar.pp

    @property
    def dims(self):
        s = self.scalar
        return {"G": 2 * s.nV, "V": 2 * s.nW, "Q": s.nW, "M": 2 * s.nM, "Ms": 2 * s.Ms.shape[0], "Vstar": self.star.nV}

    def closure_residual(self):
        """Relative residual of projecting d/dx_i W back onto W (zero when closed)."""
        s = self.scalar
        g = s.W_grad
        P = np.einsum("p,pa,pbd->abd", s.wq, s.W_vals, g)
        res = g - np.einsum("abd,pa->pbd", P, s.W_vals)
        num = np.einsum("p,pbd,pbd->", s.wq, res, res)
        den = np.einsum("p,pbd,pbd->", s.wq, g, g)
        return float(np.sqrt(num / den)) if den > 0 else 0.0


def build_ns_spaces(family, k, J=None):
    sp = get_local_spaces(family, k, np.eye(2) if J is None else J)
    ns = NSLocalSpaceSet(sp)
    if ns.closure_residual() > 1e-10:
        raise ConstructionError("W(K) is not closed under differentiation")
    _ = ns.star
    return ns


class MeshSpaces:
    """Per-element access to the (cached) local spaces of a mesh."""

    def __init__(self, mesh, family, k):
        fam, kk = parse_family(family)
        if kk is not None:
            k = kk
        if family_shape(fam) != mesh.shape:
            raise InvalidArgument(f"{fam} is defined on {family_shape(fam)}s, mesh has {mesh.shape}s")
        self.mesh = mesh
        self.family = fam
        self.k = int(k)
        self.offsets, Js = mesh.affine_maps()
        keys = {}
        cls = np.empty(mesh.n_elements, dtype=int)
        self.classes = []
        for e, J in enumerate(Js):
            key = _key(fam, k, J)
            if key not in keys:
                keys[key] = len(self.classes)
                self.classes.append(get_local_spaces(fam, k, J))
            cls[e] = keys[key]
        self.cls = cls
        self.groups = [np.flatnonzero(cls == c) for c in range(len(self.classes))]
        sp0 = self.classes[0]
        self.nM_face = self.k + 1
        self.nW = sp0.nW
        self.nV = sp0.nV
        self.nM = sp0.nM

    def __getitem__(self, e):
        return self.classes[self.cls[e]]

    def element_dofs(self, e):
        """Global trace dof indices (nM,) and local sign multipliers (nM,)."""
        return self.trace_dofs()[0][e], self.trace_dofs()[1][e]

    @cached_property
    def _trace_maps(self):
        top = self.mesh.topology
        kk = self.k + 1
        base = top.element_faces[:, :, None] * kk + np.arange(kk)
        signs = top.orientation[:, :, None] ** np.arange(kk)
        return base.reshape(self.mesh.n_elements, -1), signs.reshape(self.mesh.n_elements, -1).astype(float)

    def trace_dofs(self):
        return self._trace_maps

    @property
    def n_trace(self):
        return self.mesh.n_faces * (self.k + 1)

    def boundary_dofs(self):
        kk = self.k + 1
        f = np.flatnonzero(self.mesh.topology.boundary)
        return (f[:, None] * kk + np.arange(kk)).ravel()

    def quad_points(self, e):
        return self[e].to_physical(self.offsets[e], self[e].xq)

    def all_quad_points(self):
        """Physical volume quadrature points (ne, nq, 2)."""
        out = np.empty((self.mesh.n_elements, len(self.classes[0].xq), 2))
        for c, idx in enumerate(self.groups):
            sp = self.classes[c]
            out[idx] = self.offsets[idx, None, :] + (sp.xq @ sp.J.T)[None]
        return out

    def all_face_points(self):
        """Physical face quadrature points (ne, nf, nqf, 2)."""
        sp0 = self.classes[0]
        out = np.empty((self.mesh.n_elements,) + sp0.xf.shape)
        for c, idx in enumerate(self.groups):
            sp = self.classes[c]
            out[idx] = self.offsets[idx, None, None, :] + (sp.xf @ sp.J.T)[None]
        return out

    def diameters(self):
        return np.array([sp.h for sp in self.classes])[self.cls]

    def areas(self):
        return np.array([sp.area for sp in self.classes])[self.cls]

    def project_trace(self, g):
        """Facewise L2 projection of a function g(points (..., 2)) -> (..., ) onto M_h.

        ``g`` may return extra trailing components; the result is (n_trace, ...).
        """
        mesh = self.mesh
        top = mesh.topology
        kk = self.k + 1
        e = B.edge_quadrature(self.classes[0].qdeg)
        a = mesh.vertices[top.faces[:, 0]]
        b = mesh.vertices[top.faces[:, 1]]
        pts = a[:, None, :] + e.points[None, :, None] * (b - a)[:, None, :]
        L = np.linalg.norm(b - a, axis=1)
        vals = np.asarray(g(pts))
        phi = npleg.legvander(2 * e.points - 1, self.k) * np.sqrt(2 * np.arange(kk) + 1)
        coef = np.einsum("p,pi,fp...->fi...", e.weights, phi, vals) * np.sqrt(L)[:, None].reshape(-1, 1, *([1] * (vals.ndim - 2)))
        return coef.reshape(len(L) * kk, *vals.shape[2:])
