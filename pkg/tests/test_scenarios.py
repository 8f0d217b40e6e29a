import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chshell.constitutive import MaterialParams
from chshell.scenarios import (auto_fixed_dofs, build_square, build_torus, distance_to_torus,
                               exact_torus_mesh, initial_phase_field, load_external_scenario,
                               prolonged_phase_field, subdivide_periodic, surface_area,
                               torus_fixed_dofs, torus_mesh)
from chshell.spline import (build_structured_patch, evaluate_field, gauss_rule, locate, tabulate,
                            write_extraction_mesh)
from chshell.geometry import surface_points

R, r = 2.0, 0.5


def test_square_reference_geometry():
    sc = build_square(n_elems=16)
    model = sc.model()
    assert abs(model.reference_area - 1.0) < 1e-13
    assert np.allclose(model.ref.normal[..., 2], 1.0)
    assert np.abs(model.ref.curvature).max() < 1e-13
    assert not sc.mechanics and sc.fixed.size == 0


def test_square_initial_condition_statistics():
    sc = build_square()
    assert sc.phi0.shape == (64 * 64,)
    assert sc.phi0.min() >= 0.63 - 0.05 and sc.phi0.max() <= 0.63 + 0.05
    assert abs(sc.phi0.mean() - 0.63) < 0.002
    assert np.array_equal(sc.phi0, build_square().phi0)
    assert not np.array_equal(sc.phi0, build_square(seed=1).phi0)


@given(st.floats(0.05, 0.95), st.floats(0.0, 0.04), st.integers(0, 1000))
@settings(max_examples=30)
def test_initial_field_bounds(phi_bar, amp, seed):
    phi = initial_phase_field(500, phi_bar, amp, seed)
    assert np.all(phi >= phi_bar - amp) and np.all(phi <= phi_bar + amp)
    assert np.all((phi > 0) & (phi < 1))


def test_invalid_settings():
    with pytest.raises(ValueError):
        initial_phase_field(10, 1.2)
    with pytest.raises(ValueError):
        initial_phase_field(10, 0.03, amplitude=0.05)
    with pytest.raises(ValueError):
        torus_mesh(0.5, 0.5, 8, 4)
    with pytest.raises(ValueError):
        exact_torus_mesh(1.0, 2.0)
    with pytest.raises(ValueError):
        torus_fixed_dofs(10)
    with pytest.raises(ValueError):
        prolonged_phase_field((8, 32), (3, 12), 2, 0.3, 0.05, 0)


def test_exact_torus_area_and_surface():
    space, X = exact_torus_mesh(R, r)
    assert abs(surface_area(space, X, points=10) - 4 * np.pi ** 2 * R * r) < 1e-10
    xi, _ = gauss_rule(5)
    pts = surface_points(tabulate(space, xi), X)
    assert distance_to_torus(R, r, pts).max() < 1e-12


def test_spline_torus_approximation_converges():
    errs = []
    for n in (4, 8, 16):
        space, X, _ = torus_mesh(R, r, 4 * n, n)
        xi, _ = gauss_rule(4)
        errs.append(distance_to_torus(R, r, surface_points(tabulate(space, xi), X)).max())
    assert errs[0] > errs[1] > errs[2]
    assert errs[1] / errs[2] > 6                      # third order for quadratics
    space, X, _ = torus_mesh(R, r, 64, 16)
    assert abs(surface_area(space, X) / (4 * np.pi ** 2 * R * r) - 1) < 1e-5


def test_torus_control_point_layout():
    sc = build_torus(R=R, r=r, n_u=16, n_v=4)
    X = sc.X
    # node 0 on the outer equator, node B opposite, node C a quarter turn away
    assert X[0, 1] == pytest.approx(0.0, abs=1e-12) and X[0, 0] > R
    assert X[8, 0] < -R and abs(X[8, 1]) < 1e-12
    assert X[4, 1] > R and abs(X[4, 0]) < 1e-12
    assert np.array_equal(sc.fixed, [0, 1, 2, 25, 26, 14])
    assert build_torus(n_u=16, n_v=4, rigid=True).fixed.size == 0


@pytest.mark.parametrize("axis", [0, 1])
def test_subdivision_preserves_the_field(axis):
    rng = np.random.default_rng(4)
    coarse = rng.standard_normal((4, 6))
    fine = subdivide_periodic(coarse, 2, axis)
    shape = (4, 6)
    fshape = tuple(2 * s if k == axis else s for k, s in enumerate(shape))
    cs = build_structured_patch(2, shape[1], shape[0], True, True)
    fs = build_structured_patch(2, fshape[1], fshape[0], True, True)
    for u, v in rng.uniform(0, 1, (20, 2)):
        ec, lc = locate(cs, u, v)
        ef, lf = locate(fs, u, v)
        assert np.isclose(evaluate_field(cs, ec, lc, coarse.reshape(-1)),
                          evaluate_field(fs, ef, lf, fine.reshape(-1)), atol=1e-13)


def test_prolonged_fields_share_mean_and_bounds():
    a = prolonged_phase_field((4, 16), (4, 16), 2, 1 / 3, 0.05, 3)
    b = prolonged_phase_field((16, 64), (4, 16), 2, 1 / 3, 0.05, 3)
    assert np.isclose(a.mean(), b.mean(), atol=1e-14)
    assert b.min() >= a.min() - 1e-14 and b.max() <= a.max() + 1e-14   # convex hull property


def test_auto_supports_and_external_scenario(tmp_path):
    space, X = exact_torus_mesh(R, r)
    path = tmp_path / "torus.iga"
    with open(path, "w", encoding="utf-8") as fh:
        write_extraction_mesh(space, fh, X)
    params = MaterialParams.two_phase(lam=0.075, D=4.0)
    sc = load_external_scenario(str(path), params, seed=2)
    assert not sc.mechanics and sc.fixed.size == 0
    assert sc.phi0.shape == (space.n_basis,)
    assert abs(sc.model(quad_points=10).reference_area - 4 * np.pi ** 2 * R * r) < 1e-10
    deform = load_external_scenario(path.read_text(), params, rigid=False)
    assert np.array_equal(deform.fixed, auto_fixed_dofs(X)) and deform.fixed.size == 6
    buf = io.StringIO()
    write_extraction_mesh(space, buf)
    with pytest.raises(ValueError):
        load_external_scenario(io.StringIO(buf.getvalue()), params)
