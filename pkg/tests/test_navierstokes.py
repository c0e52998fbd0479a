import json

import numpy as np
import pytest

from mdhdg.analysis import error_report, local_trace, manufactured_problem
from mdhdg.errors import InvalidArgument, NonConvergence
from mdhdg.mesh import build_structured_mesh
from mdhdg.navierstokes import (BetaLift, NSDiscretization, convective_form, convective_bound_ratios, ns_energy,
                                oh_identity_test, ph_boundedness, random_incompressible_pair,
                                solve_navier_stokes, solve_stokes, upwind_identity_rhs)


@pytest.fixture(scope="module")
def disc4():
    return NSDiscretization(build_structured_mesh("triangle", 4), "HDG", 1)


@pytest.fixture(scope="module")
def trig8():
    prob = manufactured_problem("trig", 1.0)
    mesh = build_structured_mesh("triangle", 8)
    return prob, solve_navier_stokes(mesh, "HDG", 1, 1.0, f=prob.f)


def _beta_values(disc, beta, pts_ref=None):
    out = []
    for c, els in enumerate(disc.spaces.groups):
        d = disc.data[c]
        out.append((els, np.einsum("es,psc->epc", beta[els], d.st.V_vals)))
    return out


@pytest.mark.parametrize("fam,shape", [("HDG", "triangle"), ("HDGQ", "square")])
def test_postprocess_reproduces_divergence_free_fields(fam, shape):
    disc = NSDiscretization(build_structured_mesh(shape, 3), fam, 1)
    from mdhdg.analysis import project_M, project_W
    for fun in (lambda x: np.broadcast_to([0.3, -1.2], x.shape), lambda x: np.stack([x[..., 1], 0 * x[..., 0]], -1)):
        u = project_W(disc.spaces, fun)
        uh = project_M(disc.spaces, fun)
        beta = disc.postprocess(u, uh)
        pts = disc.spaces.all_quad_points()
        for els, vals in _beta_values(disc, beta):
            assert np.allclose(vals, fun(pts[els]), atol=1e-11)


def test_zero_forcing_gives_zero_solution(disc4):
    sol = solve_navier_stokes(disc4.mesh, disc=disc4)
    assert len(sol.trace) == 1
    assert not np.abs(sol.u).max() and not np.abs(sol.p).max()


def test_oh_identity(disc4, rng):
    assert oh_identity_test(disc4, rng, n_pairs=20) <= 1e-10


def test_convective_form_linear_in_test_pair(disc4, rng):
    Z = random_incompressible_pair(disc4, rng)
    beta = disc4.postprocess(*Z)
    ne, nW, nT = disc4.mesh.n_elements, disc4.nW, disc4.spaces.n_trace
    u, v, w = (rng.standard_normal((ne, 2, nW)) for _ in range(3))
    uh, vh, wh = (local_trace(disc4.spaces, rng.standard_normal((nT, 2))) for _ in range(3))
    a = convective_form(disc4, beta, u, uh, v + 2 * w, vh + 2 * wh)
    b = convective_form(disc4, beta, u, uh, v, vh) + 2 * convective_form(disc4, beta, u, uh, w, wh)
    assert a == pytest.approx(b, rel=1e-12)
    assert upwind_identity_rhs(disc4, beta, u, uh) >= 0


def test_structural_invariants(trig8):
    _, sol = trig8
    info = sol.info
    assert info["converged"]
    assert info["max_div_beta"] <= 1e-10
    assert info["beta_jump"] <= 1e-10
    assert abs(info["pressure_mean"]) <= 1e-12 * info["p_norm"]
    assert all(t["energy_ok"] for t in sol.trace)
    assert all(t["div_beta"] <= 1e-10 and t["jump_beta"] <= 1e-10 for t in sol.trace)


def test_nonlinear_residual_and_incompressibility(trig8):
    prob, sol = trig8
    disc = sol.info["disc"]
    assert disc.residual(sol, prob.f) <= 1e-9
    assert disc.incompressibility_residual(sol.u, sol.uhat) <= 1e-11


def test_regression_first_build(trig8):
    """Values of the first build on HDG1, trig problem, n = 8."""
    prob, sol = trig8
    row = error_report(sol.spaces, sol, prob)
    assert row["err_u"] == pytest.approx(0.12201324365986291, rel=1e-7)
    assert row["e_u"] == pytest.approx(0.1099319257639251, rel=1e-7)
    assert row["err_p"] == pytest.approx(0.2266330430147223, rel=1e-7)
    assert len(sol.trace) == 9
    ratios = [t["ratio"] for t in sol.trace[:4]]
    assert ratios[0] is None
    assert np.allclose(ratios[1:], [0.11732363583142985, 0.0063444658235087634, 0.022692808297262102], rtol=1e-5)
    assert sol.info["energy"] == pytest.approx(195.92433495533479, rel=1e-8)
    assert sol.info["f_u"] == pytest.approx(196.78873912111385, rel=1e-8)


def test_picard_contraction(trig8):
    _, sol = trig8
    ratios = [t["ratio"] for t in sol.trace if t["ratio"] is not None]
    assert max(ratios) < 1
    assert sol.trace[-1]["increment"] <= 1e-10 * sol.info["disc"].h1_norm(sol.u, sol.uhat)


def test_energy_identity_for_stokes(disc4):
    prob = manufactured_problem("trig", 1.0)
    sol = solve_stokes(disc4.mesh, nu=1.0, f=prob.f_stokes, disc=disc4)
    assert sol.energy == pytest.approx(float(np.sum(sol.loads * sol.u)), rel=1e-10)
    assert ns_energy(sol, nu=2.0) == pytest.approx(2 * sol.energy, rel=1e-12)


def test_stokes_converges():
    prob = manufactured_problem("trig", 1.0)
    errs = []
    for n in (4, 8):
        mesh = build_structured_mesh("triangle", n)
        sol = solve_stokes(mesh, "HDG", 1, 1.0, f=prob.f_stokes)
        errs.append(error_report(sol.spaces, sol, prob))
    assert np.log2(errs[0]["err_u"] / errs[1]["err_u"]) > 1.7
    assert np.log2(errs[0]["e_u"] / errs[1]["e_u"]) > 2.5


def test_hdgq_solves():
    prob = manufactured_problem("trig", 1.0)
    sol = solve_navier_stokes(build_structured_mesh("square", 4), "HDGQ", 1, 1.0, f=prob.f)
    assert sol.info["max_div_beta"] <= 1e-10 and sol.info["beta_jump"] <= 1e-10
    assert all(t["energy_ok"] for t in sol.trace)


def test_low_viscosity_reports_nonconvergence():
    prob = manufactured_problem("trig", 1.0)
    mesh = build_structured_mesh("triangle", 4)
    with pytest.raises(NonConvergence) as exc:
        solve_navier_stokes(mesh, "HDG", 1, 1e-3, f=prob.f, maxit=8)
    assert len(exc.value.trace) == 8
    sol = solve_navier_stokes(mesh, "HDG", 1, 1e-3, f=prob.f, maxit=8, raise_on_failure=False)
    assert not sol.info["converged"]


def test_bad_arguments(disc4):
    with pytest.raises(InvalidArgument):
        solve_navier_stokes(disc4.mesh, nu=0.0)
    with pytest.raises(InvalidArgument):
        solve_navier_stokes(disc4.mesh, relaxation=1.5)
    with pytest.raises(InvalidArgument):
        solve_stokes(disc4.mesh, nu=-1.0)


def test_beta_lift_norm_of_constant(disc4):
    lift = BetaLift(disc4)
    from mdhdg.analysis import project_M, project_W
    const = lambda x: np.broadcast_to([1.0, 2.0], x.shape)  # noqa: E731
    beta = disc4.postprocess(project_W(disc4.spaces, const), project_M(disc4.spaces, const))
    assert lift.norm(beta, "H1") <= 1e-10
    assert lift.norm(beta, "L0", average=False) > 0


def test_convective_bound_ratios_bounded(rng):
    out = []
    for n in (2, 4):
        disc = NSDiscretization(build_structured_mesh("triangle", n), "HDG", 1)
        out.append(convective_bound_ratios(disc, rng, n_samples=4))
    for key in "abc":
        assert 0 < out[1][key] < 10 * max(out[0][key], 1e-3) + 10


@pytest.mark.parametrize("fam,shape,k", [("HDG", "triangle", 1), ("HDGQ", "square", 1), ("HDG", "triangle", 2)])
def test_ph_bounded_and_mesh_independent(fam, shape, k):
    a = ph_boundedness(NSDiscretization(build_structured_mesh(shape, 2), fam, k))
    b = ph_boundedness(NSDiscretization(build_structured_mesh(shape, 4), fam, k))
    for key in "01":
        assert a[key] == pytest.approx(b[key], rel=1e-6)
        assert 1 <= a[key] < 20


def test_json_export(disc4):
    prob = manufactured_problem("trig", 1.0)
    sol = solve_navier_stokes(disc4.mesh, f=prob.f, disc=disc4)
    d = json.loads(sol.to_json())
    assert d["schema_version"] == 1 and d["kind"] == "navier-stokes"
    assert len(d["elements"]) == disc4.mesh.n_elements
    assert d["iterations"][0]["iterate"] == 1
