import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chshell.geometry import (SingularGeometryError, covariant_ops, metric_rate, point_geometry,
                              surface_points)
from chshell.scenarios import exact_torus_mesh
from chshell.spline import build_structured_patch, element_basis, gauss_rule, tabulate

R, r = 2.0, 0.5


@pytest.fixture(scope="module")
def torus():
    space, X = exact_torus_mesh(R, r)
    xi, _ = gauss_rule(4)
    tab = tabulate(space, xi)
    return space, X, tab, point_geometry(tab, X)


def torus_angles(pts):
    phi = np.arctan2(pts[..., 1], pts[..., 0])
    rho = np.hypot(pts[..., 0], pts[..., 1])
    theta = np.arctan2(pts[..., 2], rho - R)
    return phi, theta


def test_torus_normal_and_curvatures_match_analytic(torus):
    space, X, tab, g = torus
    pts = surface_points(tab, X)
    phi, th = torus_angles(pts)
    n_exact = np.stack([np.cos(th) * np.cos(phi), np.cos(th) * np.sin(phi), np.sin(th)], -1)
    assert np.abs(g.normal - n_exact).max() < 1e-12               # outward
    K = np.cos(th) / (r * (R + r * np.cos(th)))
    H = -(R + 2 * r * np.cos(th)) / (2 * r * (R + r * np.cos(th)))
    assert np.abs(g.gauss_curvature - K).max() < 1e-11
    assert np.abs(g.mean_curvature - H).max() < 1e-11


def test_laplacian_of_position_is_mean_curvature_normal(torus):
    space, X, tab, g = torus
    ops = covariant_ops(g, tab)
    lap_x = np.einsum("eqn,enk->eqk", ops.lap, X[tab.indices])
    assert np.abs(lap_x - 2 * g.mean_curvature[..., None] * g.normal).max() < 1e-10
    # the surface gradient of the position is the tangential projector
    grad_x = np.einsum("eqkn,enj->eqkj", ops.grad, X[tab.indices])
    proj = np.eye(3) - np.einsum("eqi,eqj->eqij", g.normal, g.normal)
    assert np.abs(grad_x - proj).max() < 1e-12


def graph_patch():
    """Single quadratic element representing z = u^2 + v^2 exactly on [0, 1]^2."""
    space = build_structured_patch(2, 1, 1)
    c = np.array([0.0, 0.0, 1.0])
    X = np.array([[i / 2, j / 2, c[i] + c[j]] for j in range(3) for i in range(3)])
    return space, X


@given(st.floats(0, 1), st.floats(0, 1))
@settings(max_examples=30, deadline=None)
def test_graph_surface_curvatures(u, v):
    space, X = graph_patch()
    g = point_geometry(element_basis(space, 0, (u, v)), X)
    W2 = 1 + 4 * u * u + 4 * v * v
    K = 4 / W2 ** 2
    H = ((1 + 4 * v * v) * 2 + (1 + 4 * u * u) * 2) / (2 * W2 ** 1.5)
    assert abs(g.gauss_curvature - K) < 1e-12
    assert abs(g.mean_curvature - H) < 1e-12
    assert abs(g.area - np.sqrt(W2)) < 1e-12


def test_christoffel_symbols_match_metric_derivatives():
    space, X = graph_patch()
    x0, h = np.array([0.3, 0.7]), 1e-5
    g = point_geometry(element_basis(space, 0, x0), X)
    dA = []
    for d in range(2):
        e = np.eye(2)[d] * h
        gp = point_geometry(element_basis(space, 0, x0 + e), X).metric
        gm = point_geometry(element_basis(space, 0, x0 - e), X).metric
        dA.append((gp - gm) / (2 * h))
    dA = np.array(dA)                                   # dA[c, a, b] = d a_ab / d xi^c
    low = 0.5 * (np.einsum("bda->dab", dA) + np.einsum("adb->dab", dA) - np.einsum("dab->dab", dA))
    gam = np.einsum("gd,dab->gab", g.metric_inv, low)
    assert np.allclose(gam, g.christoffel, atol=1e-8)


def test_stretch_invariants():
    space, X = graph_patch()
    b = element_basis(space, 0, (0.4, 0.2))
    ref = point_geometry(b, X)
    cur = point_geometry(b, 2 * X, reference=ref)
    assert abs(cur.J - 4) < 1e-12 and abs(cur.I1 - 8) < 1e-12
    assert abs(cur.mean_curvature - ref.mean_curvature / 2) < 1e-12


def test_metric_rate_matches_finite_difference():
    space, X = graph_patch()
    rng = np.random.default_rng(3)
    V = rng.standard_normal(X.shape)
    b = element_basis(space, 0, (0.25, 0.6))
    g = point_geometry(b, X)
    adot, up = metric_rate(g, b, V)
    h = 1e-6
    fd = (point_geometry(b, X + h * V).metric - point_geometry(b, X - h * V).metric) / (2 * h)
    fd_up = (point_geometry(b, X + h * V).metric_inv
             - point_geometry(b, X - h * V).metric_inv) / (2 * h)
    assert np.allclose(adot, fd, atol=1e-8)
    assert np.allclose(up, fd_up, atol=1e-8)


def test_degenerate_element_is_reported():
    space = build_structured_patch(2, 2, 1)
    X = np.array([[i / 4, 0.0, 0.0] for j in range(3) for i in range(4)])   # collapsed to a line
    xi, _ = gauss_rule(2)
    with pytest.raises(SingularGeometryError) as exc:
        point_geometry(tabulate(space, xi), X)
    assert exc.value.element == 0
