import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdhdg.analysis import local_trace
from mdhdg.errors import ConstructionError, InvalidArgument
from mdhdg.mesh import build_structured_mesh
from mdhdg.spaces import (FAMILIES, MAX_K, LocalSpaceSet, MeshSpaces, build_ns_spaces, build_pp_space,
                          family_shape, generators, get_local_spaces, parse_family)

ALL = [(f, k) for f in FAMILIES for k in range(1 if f.startswith("BDM") else 0, 4)]
I2 = np.eye(2)


@pytest.mark.parametrize("fam,k,nV,nW,nM", [("RT", 0, 3, 1, 3), ("HDG", 1, 6, 3, 6), ("TNT", 1, 11, 4, 8),
                                            ("BDM", 2, 12, 3, 9), ("HDGQ", 1, 10, 4, 8)])
def test_dimensions(fam, k, nV, nW, nM):
    sp = get_local_spaces(fam, k, I2)
    assert (sp.nV, sp.nW, sp.nM) == (nV, nW, nM)
    V, W = generators(fam, k)
    assert sp.nV == len(V) and sp.nW == len(W)  # no accidental dependence


@pytest.mark.parametrize("fam,k", ALL)
def test_stabilization_dimension_identity(fam, k):
    sp = get_local_spaces(fam, k, I2)
    assert sp.Ms.shape[0] + sp.dim_divV == sp.nW
    expect = {"RT": 0, "BDM": 0, "TNT": 0, "BDMQ": 0, "HDG": k + 1, "HDGQ": 1}[fam]
    if k == 0 and fam in ("HDG", "HDGQ"):
        expect = 1
    assert sp.Ms.shape[0] == expect


def test_stabilization_face_choice():
    sp = get_local_spaces("HDG", 2, I2)
    assert sp.Fstar == 1
    blk = np.zeros(sp.nM, dtype=bool)
    blk[3:6] = True
    assert np.allclose(sp.Ms[:, ~blk], 0.0)
    assert get_local_spaces("HDGQ", 2, I2).Fstar == 0
    assert get_local_spaces("RT", 2, I2).Fstar is None


@pytest.mark.parametrize("fam,k,vt_perp,wt_perp", [("RT", 0, 3, 0), ("HDG", 1, 4, 2)])
def test_tilde_split_dimensions(fam, k, vt_perp, wt_perp):
    sp = get_local_spaces(fam, k, I2)
    assert sp.Vtp.shape[1] == vt_perp and sp.Wtp.shape[1] == wt_perp


@pytest.mark.parametrize("fam,k", ALL)
def test_grad_w_orthogonal_to_vt_perp(fam, k):
    sp = get_local_spaces(fam, k, I2)
    assert np.abs(sp.Vtp.T @ sp.gradW_in_V).max(initial=0.0) <= 1e-12 * max(1.0, np.abs(sp.gradW_in_V).max())


@pytest.mark.parametrize("fam,k", [(f, k) for f, k in ALL if f in ("RT", "HDG", "TNT", "HDGQ")])
def test_pp_space(fam, k):
    sp = get_local_spaces(fam, k, I2)
    star = build_pp_space(sp)
    assert star.dim_divV == star.nW == sp.nW
    if fam in ("RT", "TNT"):
        assert star is sp
    if fam == "HDG":
        assert star.family == "RT"


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), fam=st.sampled_from(["RT", "HDG", "TNT", "HDGQ"]), k=st.integers(0, 2))
def test_physical_orthonormality_under_affine_maps(seed, fam, k):
    rng = np.random.default_rng(seed)
    J = np.eye(2) + 0.4 * rng.uniform(-1, 1, (2, 2))
    J *= rng.uniform(0.1, 3.0)
    if np.linalg.det(J) <= 0:
        J[:, 0] *= -1
        J = J[:, ::-1]
    sp = LocalSpaceSet(fam, k, J)
    assert np.allclose(sp.gram_V, np.eye(sp.nV), atol=1e-10)
    assert np.allclose(sp.gram_W, np.eye(sp.nW), atol=1e-10)
    gM = np.einsum("fp,fpm,fpn->mn", sp.wf, sp.M_face, sp.M_face)
    assert np.allclose(gM, np.eye(sp.nM), atol=1e-10)
    assert sp.Ms.shape[0] + sp.dim_divV == sp.nW


def test_argument_errors():
    with pytest.raises(InvalidArgument):
        generators("BDM", 0)
    with pytest.raises(InvalidArgument):
        generators("RT", MAX_K + 1)
    with pytest.raises(InvalidArgument):
        generators("XYZ", 1)
    with pytest.raises(InvalidArgument):
        MeshSpaces(build_structured_mesh("square", 2), "RT", 1)
    with pytest.raises(InvalidArgument):
        LocalSpaceSet("RT", 1, np.diag([1.0, -1.0]))
    assert parse_family("HDGQ3") == ("HDGQ", 3)
    assert family_shape("BDMQ") == "square"


def test_ns_closure():
    for fam in ("HDG", "HDGQ", "BDM"):
        assert build_ns_spaces(fam, 2).closure_residual() < 1e-12
    sp = get_local_spaces("TNT", 1, I2)  # W = Q_1, closed as well
    from mdhdg.spaces import NSLocalSpaceSet
    assert NSLocalSpaceSet(sp).closure_residual() < 1e-12


def test_custom_spaces_have_no_pp():
    from mdhdg.spaces import custom_spaces
    V, W = generators("HDGQ", 1)
    sp = custom_spaces(V[:-2], W, 1)
    with pytest.raises(ConstructionError):
        _ = sp.pp


@pytest.mark.parametrize("shape,fam", [("triangle", "HDG"), ("square", "TNT")])
def test_global_trace_orientation(shape, fam):
    """Local traces of a projected global function equal elementwise face projections."""
    mesh = build_structured_mesh(shape, 3)
    S = MeshSpaces(mesh, fam, 2)
    g = lambda x: np.sin(x[..., 0] + 2 * x[..., 1])  # noqa: E731
    loc = local_trace(S, S.project_trace(g))
    fp = S.all_face_points()
    for e in range(mesh.n_elements):
        sp = S[e]
        direct = np.einsum("fp,fpm,fp->m", sp.wf, sp.M_face, g(fp[e]))
        assert np.allclose(loc[e], direct, atol=1e-13)


def test_mesh_spaces_share_classes():
    S = MeshSpaces(build_structured_mesh("triangle", 4), "RT", 1)
    assert len(S.classes) == 2
    assert S.n_trace == S.mesh.n_faces * 2
    assert len(S.boundary_dofs()) == 16 * 2
