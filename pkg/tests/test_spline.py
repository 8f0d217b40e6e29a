import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.interpolate import BSpline
from scipy.special import comb

from chshell.spline import (KnotVector, MeshFormatError, SplineError, bernstein_eval,
                            build_structured_patch, check_partition_of_unity, edge_continuity,
                            element_basis, evaluate_field, gauss_rule, load_extraction_mesh,
                            locate, tabulate, write_extraction_mesh)

unit = st.floats(0.0, 1.0, allow_nan=False)


def global_basis_1d(kv: KnotVector, u: float) -> np.ndarray:
    """All global basis values at parameter ``u`` through the extraction operator."""
    out = np.zeros(kv.n_basis)
    for idx, C, (a, b) in kv.extraction():
        if a <= u <= b:
            out[:] = 0.0
            np.add.at(out, idx, C @ bernstein_eval(kv.degree, (u - a) / (b - a))[0])
            return out
    raise AssertionError("parameter outside the knot span")


# -- Bernstein polynomials -----------------------------------------------------

@pytest.mark.parametrize("p", [0, 1, 2, 3, 4])
def test_bernstein_matches_closed_form(p):
    x = np.linspace(0, 1, 11)
    ref = np.array([[comb(p, i) * t ** i * (1 - t) ** (p - i) for i in range(p + 1)] for t in x])
    assert np.allclose(bernstein_eval(p, x)[0], ref, atol=1e-15)


@given(unit, st.integers(2, 5))
def test_bernstein_partition_and_nonnegativity(x, p):
    b = bernstein_eval(p, x, 2)
    assert abs(b[0].sum() - 1) < 1e-14
    assert np.all(b[0] >= 0)
    assert abs(b[1].sum()) < 1e-12 and abs(b[2].sum()) < 1e-10


@pytest.mark.parametrize("p", [2, 3])
def test_bernstein_derivatives_against_polynomial_derivative(p):
    x = np.linspace(0.05, 0.95, 7)
    b = bernstein_eval(p, x, 2)
    for i in range(p + 1):
        poly = comb(p, i) * np.polynomial.Polynomial([0, 1]) ** i \
            * np.polynomial.Polynomial([1, -1]) ** (p - i)
        assert np.allclose(b[1][:, i], poly.deriv(1)(x), atol=1e-12)
        assert np.allclose(b[2][:, i], poly.deriv(2)(x), atol=1e-11)


def test_bernstein_scalar_shape_and_domain_error():
    assert bernstein_eval(2, 0.3, 1).shape == (2, 3)
    with pytest.raises(ValueError):
        bernstein_eval(2, 1.5)
    with pytest.raises(ValueError):
        bernstein_eval(2, [0.2, -0.1])


def test_gauss_rule_integrates_tensor_polynomials_exactly():
    xi, w = gauss_rule(3)
    assert xi.shape == (9, 2) and abs(w.sum() - 1) < 1e-15
    assert xi[1, 0] > xi[0, 0] and xi[1, 1] == xi[0, 1]       # first coordinate fastest
    for a in range(6):
        for b in range(6):
            exact = 1 / ((a + 1) * (b + 1))
            assert abs(np.sum(w * xi[:, 0] ** a * xi[:, 1] ** b) - exact) < 1e-14
    with pytest.raises(ValueError):
        gauss_rule(0)
    with pytest.raises(ValueError):
        gauss_rule(11)


# -- knot vectors and extraction -------------------------------------------------

@pytest.mark.parametrize("knots", [
    (0, 0, 0, 0.2, 0.5, 0.5, 1, 1, 1),
    (0, 0, 0, 0, 0.3, 0.6, 1, 1, 1, 1),
    (0, 0, 0, 1 / 3, 2 / 3, 1, 1, 1),
])
def test_extraction_reproduces_cox_de_boor(knots):
    p = sum(1 for k in knots if k == 0) - 1
    kv = KnotVector(p, tuple(float(k) for k in knots))
    t = np.array(knots, dtype=float)
    for u in np.linspace(0, 1, 23):
        ref = BSpline.design_matrix(np.array([min(u, 1 - 1e-15)]), t, p).toarray()[0]
        assert np.allclose(global_basis_1d(kv, u), ref, atol=1e-13)


@pytest.mark.parametrize("n", [3, 5, 8])
def test_periodic_extraction_matches_shifted_cardinal_splines(n):
    kv = KnotVector.uniform(2, n, periodic=True)
    assert kv.n_basis == n
    for u in np.linspace(0, 1, 31):
        vals = global_basis_1d(kv, u)
        for k in range(n):
            elem = BSpline.basis_element(np.arange(4) / n + k / n, extrapolate=False)
            ref = sum(np.nan_to_num(elem(u + s)) for s in (-1.0, 0.0, 1.0))
            assert abs(vals[k] - ref) < 1e-13


def test_knot_vector_validation():
    with pytest.raises(SplineError):
        KnotVector(1, (0, 0, 1, 1))
    with pytest.raises(SplineError):
        KnotVector(2, (0, 0, 0, 0.5, 0.4, 1, 1, 1))
    with pytest.raises(SplineError):
        KnotVector(2, (0, 0, 0.5, 1, 1, 1))                       # not clamped
    with pytest.raises(SplineError):
        KnotVector.uniform(2, 2, periodic=True)
    with pytest.raises(SplineError):
        KnotVector(2, (0.0, 0.5, 1.0), periodic=True, period=1.0)  # knot at period end


# -- structured patches ----------------------------------------------------------

@given(st.tuples(unit, unit), st.booleans(), st.booleans())
@settings(max_examples=40, deadline=None)
def test_patch_partition_of_unity_and_derivative_sums(xi, pu, pv):
    space = build_structured_patch(2, 4, 3, pu, pv)
    for eid in (0, 5, space.n_elements - 1):
        b = element_basis(space, eid, xi)
        assert abs(b.values.sum() - 1) < 1e-13
        assert np.all(b.values >= -1e-15)
        assert np.allclose(b.d1.sum(-1), 0, atol=1e-12)
        assert np.allclose(b.d2.sum(-1), 0, atol=1e-11)


def test_patch_indexing_and_tabulation_agree_with_pointwise():
    space = build_structured_patch(2, 5, 4, True, False)
    assert space.n_basis == 5 * 6 and space.grid == (5, 4)
    xi, _ = gauss_rule(2)
    tab = tabulate(space, xi)
    for eid in (0, 7, 19):
        for q, x in enumerate(xi):
            b = element_basis(space, eid, x)
            assert np.array_equal(tab.indices[eid], b.indices)
            assert np.allclose(tab.N[eid, q], b.values)
            assert np.allclose(tab.dN[eid, q], b.d1)
            assert np.allclose(tab.ddN[eid, q], b.d2)


def test_parametric_derivative_matches_finite_difference():
    space = build_structured_patch(2, 3, 3, True, True)
    x0, h = np.array([0.37, 0.61]), 1e-6
    b = element_basis(space, 4, x0)
    for a in range(2):
        e = np.eye(2)[a] * h
        fd = (element_basis(space, 4, x0 + e).values - element_basis(space, 4, x0 - e).values) / (2 * h)
        assert np.allclose(fd, b.d1[a], atol=1e-8)


def test_locate():
    space = build_structured_patch(2, 4, 4)
    e, loc = locate(space, 0.3, 0.8)
    assert e == 3 * 4 + 1
    assert np.allclose(loc, [0.2, 0.2])
    with pytest.raises(ValueError):
        locate(space, 1.2, 0.5)


def test_c1_continuity_report_on_periodic_patch():
    rep = edge_continuity(build_structured_patch(2, 4, 4, True, True))
    assert rep.edges_checked > 0
    assert rep.c0_jump < 1e-12 and rep.c1_jump < 1e-10
    assert rep.ok()


def test_repeated_knot_is_only_c0():
    kv = KnotVector(2, (0.0, 0.0, 0.5, 0.5), periodic=True, period=1.0)
    space = build_structured_patch(2, 0, 0, knots_u=kv, knots_v=kv)
    rep = edge_continuity(space)
    assert rep.c0_jump < 1e-12
    assert rep.c1_jump > 1e-3 and not rep.ok()


# -- extraction files --------------------------------------------------------------

def test_extraction_file_round_trip_with_weights_and_nodes():
    w = np.linspace(0.8, 1.2, 16).reshape(4, 4)
    space = build_structured_patch(2, 2, 2, weights=w)
    nodes = np.random.default_rng(1).standard_normal((space.n_basis, 3))
    buf = io.StringIO()
    write_extraction_mesh(space, buf, nodes)
    back, nodes2 = load_extraction_mesh(io.StringIO(buf.getvalue()))
    assert back.n_basis == space.n_basis and back.n_elements == space.n_elements
    assert np.array_equal(nodes, nodes2)
    for a, b in zip(space.elements, back.elements):
        assert np.array_equal(a.indices, b.indices)
        assert np.array_equal(a.coeffs, b.coeffs)
        assert np.array_equal(a.weights, b.weights)
    c = np.arange(space.n_basis, dtype=float)
    assert np.allclose(evaluate_field(space, 2, (0.3, 0.4), c),
                       evaluate_field(back, 2, (0.3, 0.4), c))


def _serialize(space):
    buf = io.StringIO()
    write_extraction_mesh(space, buf)
    return buf.getvalue()


def test_extraction_file_errors_name_line_and_element():
    text = _serialize(build_structured_patch(2, 2, 2))
    lines = text.splitlines()
    # corrupt one coefficient of element 1 so that its basis no longer sums to one
    start = next(i for i, l in enumerate(lines) if l.startswith("element 1 "))
    row = lines[start + 2].split()
    row[0] = repr(float(row[0]) + 0.5)
    bad = lines[:start + 2] + [" ".join(row)] + lines[start + 3:]
    with pytest.raises(MeshFormatError) as exc:
        load_extraction_mesh(io.StringIO("\n".join(bad)))
    assert exc.value.element == 1

    with pytest.raises(MeshFormatError) as exc:
        load_extraction_mesh(io.StringIO(text + "\nunexpected tokens\n"))
    assert exc.value.line is not None

    truncated = "\n".join(lines[:start + 3])
    with pytest.raises(MeshFormatError):
        load_extraction_mesh(io.StringIO(truncated))

    with pytest.raises(MeshFormatError) as exc:
        load_extraction_mesh(io.StringIO("not-a-header\n"))
    assert exc.value.line == 1


def test_partition_check_flags_element():
    space = build_structured_patch(2, 2, 2)
    broken = space.elements[3]
    broken.coeffs[0, 0] += 0.25
    with pytest.raises(MeshFormatError) as exc:
        check_partition_of_unity(space)
    assert exc.value.element == 3
