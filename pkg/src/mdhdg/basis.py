"""Polynomial bases over a fixed monomial dictionary, plus quadrature rules.

Every polynomial is stored as a coefficient vector over the monomials
``x**a * y**b`` with ``0 <= a, b <= DICT_DEGREE``.  Differentiation and
multiplication by a coordinate are exact integer-exponent maps on that
dictionary, so curls, gradients and divergences of generators carry no
rounding beyond the coefficient arithmetic itself.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .errors import InvalidArgument, UnsupportedDegree

DICT_DEGREE = 8
EXPONENTS = np.array(
    [(a, b) for a in range(DICT_DEGREE + 1) for b in range(DICT_DEGREE + 1)], dtype=int
)
NMON = len(EXPONENTS)
MAX_QUAD_DEGREE = 41

SHAPES = ("triangle", "square")
KINDS = ("Pk", "Qk", "homogeneous-Pk", "homogeneous-Qk")


def monomial_index(a, b):
    if not (0 <= a <= DICT_DEGREE and 0 <= b <= DICT_DEGREE):
        raise InvalidArgument(f"monomial x^{a} y^{b} outside the dictionary")
    return a * (DICT_DEGREE + 1) + b


def monomial(a, b):
    """Coefficient vector of the single monomial ``x**a y**b``."""
    c = np.zeros(NMON)
    c[monomial_index(a, b)] = 1.0
    return c


def _build_diff(axis):
    D = np.zeros((NMON, NMON))
    for j, (a, b) in enumerate(EXPONENTS):
        e = (a, b)[axis]
        if e == 0:
            continue
        target = monomial_index(a - 1, b) if axis == 0 else monomial_index(a, b - 1)
        D[target, j] = e
    return D


def _build_mul(axis):
    M = np.zeros((NMON, NMON))
    for j, (a, b) in enumerate(EXPONENTS):
        na, nb = (a + 1, b) if axis == 0 else (a, b + 1)
        if na <= DICT_DEGREE and nb <= DICT_DEGREE:
            M[monomial_index(na, nb), j] = 1.0
    return M


DIFF = (_build_diff(0), _build_diff(1))
_MUL = (_build_mul(0), _build_mul(1))
_TOP = np.array([a == DICT_DEGREE or b == DICT_DEGREE for a, b in EXPONENTS])


def diff(coeffs, axis):
    """Partial derivative along ``axis`` of coefficient array(s) (last axis = monomials)."""
    return coeffs @ DIFF[axis].T


def mul_coord(coeffs, axis):
    """Multiply by ``x`` (axis 0) or ``y`` (axis 1); overflow of the dictionary is an error."""
    if np.any(np.abs(np.asarray(coeffs)[..., _TOP]) > 0):
        raise InvalidArgument("polynomial degree exceeds the monomial dictionary")
    return coeffs @ _MUL[axis].T


def curl(coeffs):
    """Vector curl ``(-p_y, p_x)`` of a scalar coefficient vector -> shape (2, NMON)."""
    return np.stack([-diff(coeffs, 1), diff(coeffs, 0)])


def monomial_values(points):
    pts = np.atleast_2d(points)
    return pts[:, :1] ** EXPONENTS[:, 0] * pts[:, 1:2] ** EXPONENTS[:, 1]


def monomial_gradients(points):
    """Shape (npts, NMON, 2)."""
    pts = np.atleast_2d(points)
    x, y = pts[:, :1], pts[:, 1:2]
    a, b = EXPONENTS[:, 0], EXPONENTS[:, 1]
    # exponents clipped at zero; the factor a (or b) kills the term anyway
    dx = a * x ** np.maximum(a - 1, 0) * y**b
    dy = b * x**a * y ** np.maximum(b - 1, 0)
    return np.stack([dx, dy], axis=-1)


@dataclass(frozen=True)
class BasisSet:
    """A list of (possibly vector-valued) polynomials.

    ``coeffs`` has shape ``(n, ncomp, NMON)``.
    """

    shape: str
    kind: str
    degree: int
    coeffs: np.ndarray

    @property
    def dim(self):
        return self.coeffs.shape[0]

    @property
    def ncomp(self):
        return self.coeffs.shape[1]

    def values(self, points):
        """Shape (npts, n, ncomp)."""
        return np.einsum("pm,ncm->pnc", monomial_values(points), self.coeffs)

    def gradients(self, points):
        """Shape (npts, n, ncomp, 2)."""
        return np.einsum("pmd,ncm->pncd", monomial_gradients(points), self.coeffs)

    def divergence(self):
        """Divergence coefficients (n, NMON) of a two-component basis."""
        if self.ncomp != 2:
            raise InvalidArgument("divergence needs a vector basis")
        return diff(self.coeffs[:, 0], 0) + diff(self.coeffs[:, 1], 1)

    def transformed(self, matrix, kind=None):
        """New basis whose functions are ``matrix @ functions``."""
        c = np.einsum("ij,jcm->icm", np.asarray(matrix), self.coeffs)
        return BasisSet(self.shape, kind or self.kind, self.degree, c)


def evaluate(basis, points, derivative="value"):
    if derivative == "value":
        return basis.values(points)
    if derivative == "gradient":
        return basis.gradients(points)
    raise InvalidArgument(f"unknown derivative order {derivative!r}")


def _exponents(kind, k):
    if kind == "Pk":
        return [(a, d - a) for d in range(k + 1) for a in range(d, -1, -1)]
    if kind == "Qk":
        return [(a, b) for a in range(k + 1) for b in range(k + 1)]
    if kind == "homogeneous-Pk":
        return [(a, k - a) for a in range(k, -1, -1)]
    if kind == "homogeneous-Qk":
        return [(k, k)]
    raise InvalidArgument(f"unknown polynomial kind {kind!r}")


def scalar_generators(kind, k):
    """Monomial generators as a (n, NMON) array."""
    if k < 0:
        raise InvalidArgument("degree must be non-negative")
    exps = _exponents(kind, k)
    # sort by total degree so the constant comes first
    exps = sorted(exps, key=lambda e: (e[0] + e[1], -e[0]))
    return np.array([monomial(a, b) for a, b in exps])


def build_polynomial_basis(kind, k, shape):
    if shape not in SHAPES:
        raise InvalidArgument(f"unknown shape {shape!r}")
    if kind in ("Qk", "homogeneous-Qk") and shape != "square":
        raise InvalidArgument(f"{kind} is only provided on squares")
    gens = scalar_generators(kind, k)
    return BasisSet(shape, kind, k, gens[:, None, :])


def orthonormalize(values, weights, rank_tol=1e-10):
    """Orthonormalisation transform from sampled generator values.

    ``values`` has shape (npts, n, ...) and ``weights`` (npts,).  Returns
    ``T`` of shape (r, n) such that the functions ``T @ generators`` are
    orthonormal in the discrete inner product; dependent generators are
    dropped using the relative singular-value threshold ``rank_tol``.
    """
    npts, n = values.shape[:2]
    A = (np.sqrt(weights).reshape(npts, *([1] * (values.ndim - 1))) * values)
    A = np.moveaxis(A, 1, -1).reshape(-1, n)
    _, s, vt = np.linalg.svd(A, full_matrices=False)
    r = int(np.sum(s > rank_tol * s[0])) if s.size and s[0] > 0 else 0
    return (vt[:r].T / s[:r]).T


def orthonormalize_ordered(values, weights):
    """Gram-Schmidt (via QR) preserving the span of every leading subset.

    Requires linearly independent generators; returns upper-triangular-inverse
    transform ``T`` (n, n).
    """
    npts, n = values.shape[:2]
    A = (np.sqrt(weights)[:, None] * values.reshape(npts, n))
    _, R = np.linalg.qr(A)
    sgn = np.sign(np.diag(R))
    sgn[sgn == 0] = 1.0
    R = sgn[:, None] * R
    return np.linalg.solve(R, np.eye(n)).T


@dataclass(frozen=True)
class QuadRule:
    points: np.ndarray
    weights: np.ndarray
    degree: int


def _frozen(*arrays):
    for a in arrays:
        a.setflags(write=False)
    return arrays


def _check_degree(degree):
    if degree < 0:
        raise InvalidArgument("quadrature degree must be non-negative")
    if degree > MAX_QUAD_DEGREE:
        raise UnsupportedDegree(f"quadrature degree {degree} > {MAX_QUAD_DEGREE}")


@lru_cache(maxsize=None)
def edge_quadrature(degree):
    """Gauss-Legendre rule on [0, 1] exact for polynomials of ``degree``."""
    _check_degree(degree)
    n = degree // 2 + 1
    x, w = roots_legendre(n)
    pts, wts = _frozen(0.5 * (x + 1.0), 0.5 * w)
    return QuadRule(pts, wts, degree)


@lru_cache(maxsize=None)
def quadrature(shape, degree):
    """Volume rule on the reference triangle (0,0),(1,0),(0,1) or unit square.

    On the square the tensor rule integrates ``x**a y**b`` exactly whenever
    ``max(a, b) <= degree``; on the triangle, whenever ``a + b <= degree``.
    The triangle rule is a collapsed (Duffy) Gauss-Jacobi product.
    """
    _check_degree(degree)
    n = degree // 2 + 1
    if shape == "square":
        e = edge_quadrature(degree)
        X, Y = np.meshgrid(e.points, e.points, indexing="ij")
        W = np.outer(e.weights, e.weights)
        pts = np.column_stack([X.ravel(), Y.ravel()])
        wts = W.ravel()
    elif shape == "triangle":
        # (1-s) weight on the collapsed direction
        xj, wj = roots_jacobi(n, 1.0, 0.0)
        s = 0.5 * (xj + 1.0)
        ws = 0.25 * wj
        xl, wl = roots_legendre(n)
        t = 0.5 * (xl + 1.0)
        wt = 0.5 * wl
        S, T = np.meshgrid(s, t, indexing="ij")
        pts = np.column_stack([S.ravel(), (T * (1.0 - S)).ravel()])
        wts = np.outer(ws, wt).ravel()
    else:
        raise InvalidArgument(f"unknown shape {shape!r}")
    pts, wts = _frozen(pts, wts)
    return QuadRule(pts, wts, degree)
