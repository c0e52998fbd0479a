import json

import numpy as np
import pytest
import scipy.linalg as sla

from mdhdg.errors import TheoremViolation
from mdhdg.spaces import FAMILIES, LocalSpaceSet, custom_spaces, generators, get_local_spaces
from mdhdg.verify import (generalized_max_eig, inequality_constants, inequality_operands,
                          kernel_inclusion_residual, proof_constants, seminorm_equivalence,
                          verify_mdecomposition, verify_ms_conditions)

ALL = [(f, k) for f in FAMILIES for k in range(1 if f.startswith("BDM") else 0, 4)]
I2 = np.eye(2)


@pytest.mark.parametrize("fam,k", ALL)
def test_all_families_certify(fam, k):
    rep = verify_mdecomposition(get_local_spaces(fam, k, I2))
    assert rep.passed, [(c.name, c.residual) for c in rep.checks]
    assert rep.max_residual <= 1e-9
    names = [c.name for c in rep.checks]
    assert names == ["(a) trace in M", "(b) containment", "(c) isomorphism", "(d) div-free traces",
                     "(e) dim M_S", "(f) M_S norm"]


def test_hdgq_without_curl_bubbles_fails_isomorphism():
    V, W = generators("HDGQ", 1)
    sp = custom_spaces(V[:-2], W, 1)
    rep = verify_mdecomposition(sp)
    assert not rep["(c) isomorphism"].passed
    assert rep["(c) isomorphism"].residual > 0


def test_zero_measure_stabilization_face_fails_norm_condition():
    sp = get_local_spaces("HDG", 1, I2)
    a, b = verify_ms_conditions(sp, ms_basis=np.zeros_like(sp.Ms))
    assert a.passed and not b.passed
    assert b.residual == sp.Ms.shape[0]


def test_rt_ms_vacuous():
    a, b = verify_ms_conditions(get_local_spaces("RT", 2, I2))
    assert a.passed and b.passed and b.residual == 0


def test_report_json_shape():
    rep = verify_mdecomposition(get_local_spaces("HDG", 1, I2), constants=True)
    rows = json.loads(rep.to_json())
    assert {"name", "pass", "residual", "constant"} <= set(rows[0])
    assert rows[-1]["name"] == "C_PF" and rows[-1]["constant"] > 0


def rt0_oracle():
    """Independent RT0 constants on the unit triangle from hand-integrated matrices."""
    # V = span{(1,0), (0,1), (x,y)}; exact integrals on the unit triangle
    G = np.array([[1 / 2, 0, 1 / 6], [0, 1 / 2, 1 / 6], [1 / 6, 1 / 6, 1 / 6]])
    div_int = np.array([0.0, 0.0, 1.0])  # int div v = 2 * area
    # int_F v.n for faces bottom, hypotenuse, left
    flux = np.array([[0.0, 1.0, -1.0], [-1.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    L = np.array([1.0, np.sqrt(2), 1.0])
    h, per = np.sqrt(2), 2 + np.sqrt(2)
    R = np.hstack([div_int[:, None], -flux])  # rhs of the gradient map in (u, mu) coordinates
    B = R.T @ np.linalg.solve(G, R)
    J = np.hstack([np.ones((3, 1)), -np.eye(3)])
    A1 = J.T @ np.diag(L) @ J / h
    # PF: ||u - m||^2_K + h ||mu - m||^2_dK with m the boundary mean of mu
    mrow = np.r_[0.0, L / per]
    Ku = np.r_[1.0, 0, 0, 0] - mrow
    Kmu = np.hstack([np.zeros((3, 1)), np.eye(3)]) - mrow[None, :]
    Apf = (0.5 * np.outer(Ku, Ku) + h * Kmu.T @ np.diag(L) @ Kmu) / h**2
    # quotient on the complement of constants (1, 1, 1, 1)
    Q = sla.null_space(np.ones((1, 4)))
    c1 = sla.eigh(Q.T @ A1 @ Q, Q.T @ B @ Q, eigvals_only=True)[-1]
    c2 = sla.eigh(Q.T @ Apf @ Q, Q.T @ B @ Q, eigvals_only=True)[-1]
    return c1, c2


def test_rt0_constants_against_dense_oracle():
    c1, c2 = inequality_constants(get_local_spaces("RT", 0, I2))
    o1, o2 = rt0_oracle()
    assert c1 == pytest.approx(o1, rel=1e-10)
    assert c2 == pytest.approx(o2, rel=1e-10)
    # regression value of the first build
    assert c1 == pytest.approx(0.35355339059327373, rel=1e-9)


def test_constant_pair_in_both_kernels():
    sp = get_local_spaces("HDG", 2, I2)
    ops = inequality_operands(sp)
    x = np.r_[sp.w1, sp.m1]  # coordinates of u = uhat = 1
    for A in (ops.A_H1, ops.A_PF, ops.B):
        assert abs(x @ A @ x) <= 1e-12 * np.linalg.norm(A) * (x @ x)


@pytest.mark.parametrize("fam,k", ALL)
def test_kernel_inclusion(fam, k):
    ops = inequality_operands(get_local_spaces(fam, k, I2))
    assert kernel_inclusion_residual(ops.A_H1, ops.B) <= 1e-9
    assert kernel_inclusion_residual(ops.A_PF, ops.B) <= 1e-9


def test_missing_stabilization_violates_theorem():
    sp = get_local_spaces("HDG", 1, I2)
    with pytest.raises(TheoremViolation):
        inequality_constants(sp, ms_basis=np.zeros((0, sp.nM)))


def test_generalized_eig_against_scipy(rng):
    X = rng.standard_normal((6, 6))
    B = X @ X.T + np.eye(6)
    Y = rng.standard_normal((6, 6))
    A = Y @ Y.T
    assert generalized_max_eig(A, B) == pytest.approx(sla.eigh(A, B, eigvals_only=True)[-1], rel=1e-10)


@pytest.mark.parametrize("fam,k", [("RT", 1), ("HDG", 2), ("TNT", 2), ("HDGQ", 1), ("BDM", 2)])
def test_constants_invariant_under_scaling_and_rigid_motion(fam, k):
    shape_J = np.array([[1.0, 0.3], [0.1, 0.8]]) if fam in ("RT", "HDG", "BDM") else np.eye(2)
    ref = inequality_constants(LocalSpaceSet(fam, k, shape_J))
    th = 0.7
    Rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    for s in (1.0, 0.5, 0.25):
        for R in (np.eye(2), Rot):
            c = inequality_constants(LocalSpaceSet(fam, k, s * R @ shape_J))
            assert np.allclose(c, ref, rtol=1e-8, atol=0)


def test_constants_invariant_in_material_scale():
    sp = get_local_spaces("HDG", 2, I2)
    ref = inequality_constants(sp)
    for s in (0.1, 10.0):
        assert np.allclose(inequality_constants(sp, c=s * I2), ref, rtol=1e-8)


def test_seminorm_equivalence_bounded_across_scalings():
    vals = [seminorm_equivalence(LocalSpaceSet("HDG", 1, s * I2)) for s in (1.0, 0.1, 0.01)]
    for lo, hi in vals:
        assert 0 < lo <= hi < np.inf
    assert np.allclose(vals, vals[0], rtol=1e-8)


def test_proof_constants_finite():
    pc = proof_constants(get_local_spaces("HDG", 2, I2))
    assert all(np.isfinite(v) and v >= 0 for v in pc.values())
    assert pc["C_MS"] > 0
