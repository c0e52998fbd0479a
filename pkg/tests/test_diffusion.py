import json

import numpy as np
import pytest

from mdhdg.diffusion import (conservation_check, energy_balance, l2_errors, residuals, sine_problem,
                             solve_diffusion)
from mdhdg.errors import SolverError
from mdhdg.mesh import build_structured_mesh


def test_zero_data_zero_solution():
    sol = solve_diffusion(build_structured_mesh("triangle", 3), "HDG", 1)
    assert not sol.q.any() and not sol.u.any() and not sol.uhat.any()


@pytest.mark.parametrize("fam,shape", [("RT", "triangle"), ("HDG", "triangle"), ("BDM", "triangle"),
                                       ("TNT", "square"), ("HDGQ", "square"), ("BDMQ", "square")])
def test_linear_solution_reproduced(fam, shape):
    u = lambda x: x[..., 0] + 2 * x[..., 1]  # noqa: E731
    q = lambda x: np.broadcast_to(np.array([-1.0, -2.0]), x.shape)  # noqa: E731
    sol = solve_diffusion(build_structured_mesh(shape, 3), fam, 1, g=u)
    eu, eq = l2_errors(sol, u, q)
    assert eq <= 1e-10
    if fam not in ("BDM", "BDMQ"):
        assert eu <= 1e-10


def test_sine_problem_regression():
    """Errors of the first build, RT1 and HDG1 on n = 8."""
    u, q, f = sine_problem()
    mesh = build_structured_mesh("triangle", 8)
    eu, eq = l2_errors(solve_diffusion(mesh, "RT", 1, f=f, g=u), u, q)
    assert eu == pytest.approx(0.004951615585866986, rel=1e-8)
    assert eq == pytest.approx(0.01399716549983284, rel=1e-8)
    eu, eq = l2_errors(solve_diffusion(mesh, "HDG", 1, f=f, g=u), u, q)
    assert eu == pytest.approx(0.010369799133625738, rel=1e-8)
    assert eq == pytest.approx(0.029973976073677733, rel=1e-8)


@pytest.mark.parametrize("alpha", ["minimal", "zero", "scaled-full"])
def test_conservation_and_residuals(alpha):
    u, q, f = sine_problem()
    sol = solve_diffusion(build_structured_mesh("triangle", 8), "HDG" if alpha != "zero" else "RT", 1,
                          f=f, g=u, alpha_mode=alpha)
    assert conservation_check(sol) <= 1e-11
    assert conservation_check(sol, f) <= 1e-11
    r = residuals(sol)
    assert r["local"] <= 1e-10 and r["flux"] <= 1e-10


def test_boundary_trace_is_projection_of_g():
    u, _, f = sine_problem()
    g = lambda x: np.cos(x[..., 0]) + x[..., 1] ** 3  # noqa: E731
    sol = solve_diffusion(build_structured_mesh("square", 4), "HDGQ", 2, f=f, g=g)
    bd = sol.spaces.boundary_dofs()
    assert np.allclose(sol.uhat[bd], sol.spaces.project_trace(g)[bd], atol=1e-14)


def test_energy_identity_homogeneous():
    u, q, f = sine_problem()
    sol = solve_diffusion(build_structured_mesh("triangle", 6), "HDG", 2, f=f)
    E, fu, bd = energy_balance(sol)
    assert bd == 0.0
    assert E == pytest.approx(fu, rel=1e-10)


def test_cg_matches_direct():
    u, q, f = sine_problem()
    mesh = build_structured_mesh("triangle", 8)
    a = solve_diffusion(mesh, "HDG", 1, f=f, g=u)
    b = solve_diffusion(mesh, "HDG", 1, f=f, g=u, solver="cg")
    assert np.allclose(a.uhat, b.uhat, atol=1e-10)
    with pytest.raises(SolverError):
        solve_diffusion(mesh, "HDG", 1, f=f, solver="magic")


def test_variable_coefficient_runs():
    c = lambda x: 1.0 + 0.5 * x[..., 0]  # noqa: E731
    u, _, _ = sine_problem()
    sol = solve_diffusion(build_structured_mesh("triangle", 4), "RT", 1, c=c, f=1.0, g=u)
    assert sol.info["per_element"]
    assert conservation_check(sol) <= 1e-11


def test_indefinite_material_rejected():
    from mdhdg.errors import HDGError
    with pytest.raises(HDGError):
        solve_diffusion(build_structured_mesh("triangle", 2), "RT", 0, c=-1.0, f=1.0)


def test_json_export():
    sol = solve_diffusion(build_structured_mesh("triangle", 2), "RT", 0, f=1.0)
    d = json.loads(sol.to_json())
    assert d["schema_version"] == 1 and len(d["elements"]) == 8
    assert np.allclose(d["trace"], sol.uhat)
