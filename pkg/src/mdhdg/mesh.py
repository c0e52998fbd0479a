"""Conforming 2D meshes of triangles or squares with face topology."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, TopologyError

REF_VERTICES = {
    "triangle": np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
    "square": np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]),
}


@dataclass(frozen=True)
class RefElement:
    """Affine map ``x = offset + matrix @ xi`` from the reference element."""

    shape: str
    matrix: np.ndarray
    offset: np.ndarray

    @property
    def vertices(self):
        return REF_VERTICES[self.shape]

    @property
    def det(self):
        return float(np.linalg.det(self.matrix))

    @property
    def inverse(self):
        return np.linalg.inv(self.matrix)

    def to_physical(self, xi):
        return self.offset + np.atleast_2d(xi) @ self.matrix.T

    def to_reference(self, x):
        return (np.atleast_2d(x) - self.offset) @ self.inverse.T


@dataclass(frozen=True)
class Topology:
    faces: np.ndarray  # (nf, 2) vertex ids, sorted
    face_elements: np.ndarray  # (nf, 2); right = -1 on the boundary
    boundary: np.ndarray  # (nf,) bool
    element_faces: np.ndarray  # (ne, nfpe) face ids in local order
    orientation: np.ndarray  # (ne, nfpe) +1 when local traversal matches faces[f]
    normals: np.ndarray  # (ne, nfpe, 2) outward unit normals
    diameters: np.ndarray  # (ne,)
    h: float


def mesh_topology(vertices, elements):
    """Face adjacency, orientation signs, normals and diameters.

    Local face ``j`` runs from local vertex ``j`` to ``j + 1`` (counter-clockwise).
    """
    ne, nv_e = elements.shape
    edges = np.stack([elements, np.roll(elements, -1, axis=1)], axis=-1).reshape(-1, 2)
    key = np.sort(edges, axis=1)
    faces, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    if np.any(counts > 2):
        raise TopologyError("a face is shared by more than two elements")
    orientation = np.where(edges[:, 0] == key[:, 0], 1, -1).reshape(ne, nv_e)
    element_faces = inverse.reshape(ne, nv_e)

    face_elements = -np.ones((len(faces), 2), dtype=int)
    owner = np.repeat(np.arange(ne), nv_e)
    for slot, (f, e) in enumerate(zip(inverse, owner)):
        col = 0 if face_elements[f, 0] < 0 else 1
        if col == 1 and face_elements[f, 0] == e:
            raise TopologyError("element repeats a face")
        face_elements[f, col] = e
    boundary = face_elements[:, 1] < 0

    _check_no_hanging_nodes(vertices, faces, boundary)

    # outward normal for a counter-clockwise edge p->q is rot(q - p)
    t = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    t /= np.linalg.norm(t, axis=1)[:, None]
    n_face = np.column_stack([t[:, 1], -t[:, 0]])
    normals = orientation[..., None] * n_face[element_faces]

    pv = vertices[elements]
    d = np.linalg.norm(pv[:, :, None, :] - pv[:, None, :, :], axis=-1)
    diameters = d.reshape(ne, -1).max(axis=1)
    return Topology(
        faces=faces,
        face_elements=face_elements,
        boundary=boundary,
        element_faces=element_faces,
        orientation=orientation,
        normals=normals,
        diameters=diameters,
        h=float(diameters.max()),
    )


def _check_no_hanging_nodes(vertices, faces, boundary):
    # a hanging node sits strictly inside some face; only boundary-tagged faces
    # can carry one (the coarse side sees no neighbour)
    cand = faces[boundary]
    if len(cand) == 0:
        return
    a = vertices[cand[:, 0]]
    b = vertices[cand[:, 1]]
    ab = b - a
    L2 = np.einsum("ij,ij->i", ab, ab)
    for start in range(0, len(vertices), 2048):
        p = vertices[start:start + 2048]
        ap = p[None, :, :] - a[:, None, :]
        s = np.einsum("fpd,fd->fp", ap, ab) / L2[:, None]
        cross = ap[..., 0] * ab[:, None, 1] - ap[..., 1] * ab[:, None, 0]
        inside = (s > 1e-12) & (s < 1 - 1e-12) & (np.abs(cross) <= 1e-12 * L2[:, None])
        if np.any(inside):
            raise TopologyError("non-conforming mesh: hanging node on a face")


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    elements: np.ndarray
    shape: str
    topology: Topology = field(init=False, repr=False)

    def __post_init__(self):
        if self.shape not in REF_VERTICES:
            raise InvalidArgument(f"unknown element shape {self.shape!r}")
        verts = np.ascontiguousarray(self.vertices, dtype=float)
        elems = np.ascontiguousarray(self.elements, dtype=int)
        if elems.ndim != 2 or elems.shape[1] != len(REF_VERTICES[self.shape]):
            raise InvalidArgument("element connectivity does not match the shape")
        verts.setflags(write=False)
        elems.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "elements", elems)
        if np.any(self.areas <= 0):
            raise TopologyError("degenerate or clockwise element")
        object.__setattr__(self, "topology", mesh_topology(verts, elems))

    @property
    def n_elements(self):
        return len(self.elements)

    @property
    def n_faces(self):
        return len(self.topology.faces)

    @property
    def nfaces_per_element(self):
        return self.elements.shape[1]

    @property
    def areas(self):
        p = self.vertices[self.elements]
        x, y = p[..., 0], p[..., 1]
        return 0.5 * np.sum(x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y, axis=1)

    @property
    def diameters(self):
        return self.topology.diameters

    @property
    def h(self):
        return self.topology.h

    @property
    def face_lengths(self):
        f = self.topology.faces
        return np.linalg.norm(self.vertices[f[:, 1]] - self.vertices[f[:, 0]], axis=1)

    def ref_element(self, e):
        p = self.vertices[self.elements[e]]
        if self.shape == "triangle":
            J = np.column_stack([p[1] - p[0], p[2] - p[0]])
        else:
            J = np.column_stack([p[1] - p[0], p[3] - p[0]])
            if not np.allclose(p[0] + (p[1] - p[0]) + (p[3] - p[0]), p[2], atol=1e-12 * self.h):
                raise TopologyError("square element is not a parallelogram")
        return RefElement(self.shape, J, p[0].copy())

    def affine_maps(self):
        """Offsets (ne, 2) and matrices (ne, 2, 2) of every element map."""
        p = self.vertices[self.elements]
        second = 2 if self.shape == "triangle" else 3
        J = np.stack([p[:, 1] - p[:, 0], p[:, second] - p[:, 0]], axis=-1)
        return p[:, 0].copy(), J


def build_structured_mesh(shape, n, domain=((0.0, 1.0), (0.0, 1.0))):
    """``n`` x ``n`` grid on an axis-aligned rectangle.

    Triangles split every cell along its lower-left to upper-right diagonal.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise InvalidArgument("n must be a positive integer")
    (x0, x1), (y0, y1) = domain
    if not (x1 > x0 and y1 > y0):
        raise InvalidArgument("empty domain")
    xs = np.linspace(x0, x1, n + 1)
    ys = np.linspace(y0, y1, n + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    vid = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    i, j = i.ravel(), j.ravel()
    p00, p10, p11, p01 = vid[i, j], vid[i + 1, j], vid[i + 1, j + 1], vid[i, j + 1]
    if shape == "square":
        elements = np.column_stack([p00, p10, p11, p01])
    elif shape == "triangle":
        lower = np.column_stack([p00, p10, p11])
        upper = np.column_stack([p00, p11, p01])
        elements = np.stack([lower, upper], axis=1).reshape(-1, 3)
    else:
        raise InvalidArgument(f"unknown shape {shape!r}")
    return Mesh(vertices, elements, shape)


def read_mesh(path):
    """Read the plain-text format ``dim nv ne shape`` / vertices / connectivity."""
    tokens = Path(path).read_text().split()
    try:
        dim, nv, ne, shape = int(tokens[0]), int(tokens[1]), int(tokens[2]), tokens[3]
    except (IndexError, ValueError) as exc:
        raise InvalidArgument(f"bad mesh header in {path}") from exc
    if dim != 2:
        raise InvalidArgument("only 2D meshes are supported")
    nvpe = len(REF_VERTICES.get(shape, ()))
    if nvpe == 0:
        raise InvalidArgument(f"unknown element shape {shape!r}")
    body = tokens[4:]
    if len(body) != 2 * nv + nvpe * ne:
        raise InvalidArgument("mesh file length does not match its header")
    vertices = np.array(body[: 2 * nv], dtype=float).reshape(nv, 2)
    elements = np.array(body[2 * nv:], dtype=int).reshape(ne, nvpe)
    if elements.min() < 0 or elements.max() >= nv:
        raise InvalidArgument("element connectivity references a missing vertex")
    return Mesh(vertices, elements, shape)


def write_mesh(mesh, path):
    lines = [f"2 {len(mesh.vertices)} {mesh.n_elements} {mesh.shape}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines += [" ".join(str(v) for v in row) for row in mesh.elements.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")
