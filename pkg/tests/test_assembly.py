import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from chshell.assembly import (DofMap, SparseAssembler, fd_element_tangents, fd_tangent_oracle,
                              scatter_add)
from chshell.constitutive import MaterialParams
from chshell.scenarios import build_torus

R, r = 2.0, 0.5
PARAMS = MaterialParams.two_phase(lam=0.075, D=4.0).replace(eta1=0.3)


@pytest.fixture(scope="module")
def torus():
    sc = build_torus(R=R, r=r, n_u=16, n_v=8, params=PARAMS, p_int=0.1)
    return sc, sc.model()


def random_state(sc, seed, dx=0.02):
    rng = np.random.default_rng(seed)
    x = sc.X + dx * rng.standard_normal(sc.X.shape)
    v = 0.1 * rng.standard_normal(sc.X.shape)
    phi = np.clip(sc.phi0 + 0.05 * rng.standard_normal(sc.phi0.shape), 0.05, 0.95)
    return x, v, phi


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


@pytest.mark.parametrize("seed", [0, 1])
def test_element_tangents_match_finite_differences(torus, seed):
    sc, model = torus
    x, v, phi = random_state(sc, seed)
    ev = model.evaluate(x, v, phi)
    fd = fd_element_tangents(model, x, v, phi)
    for key, ref in fd.items():
        assert rel(getattr(ev, "k_" + key), ref) <= 1e-6, key


def test_assembled_blocks_match_global_finite_differences(torus):
    sc, model = torus
    x, v, phi = random_state(sc, 7)
    n = len(phi)
    B = model.global_blocks(model.evaluate(x, v, phi))
    cols = [0, 13, 3 * n - 1]
    for wrt, (top, bot) in {"x": ("xx", "px"), "v": ("xv", None), "phi": ("xp", "pp")}.items():
        c = cols if wrt != "phi" else [0, 5, n - 1]
        fd = fd_tangent_oracle(model, x, v, phi, c, wrt=wrt)
        assert rel(B[top][:, c].toarray(), fd[:3 * n]) <= 1e-6
        if bot is None:
            assert np.abs(fd[3 * n:]).max() < 1e-8          # phase residual ignores velocity
        else:
            assert rel(B[bot][:, c].toarray(), fd[3 * n:]) <= 1e-6


def test_element_and_global_residuals_agree(torus):
    sc, model = torus
    x, v, phi = random_state(sc, 3)
    ev = model.evaluate(x, v, phi, tangent=False)
    f_e, fbar_e = model.element_residuals(x, v, phi)
    idx = model.tab.indices
    assert np.allclose(scatter_add(idx, f_e, model.n_nodes), ev.f_int - ev.f_ext, atol=1e-12)
    assert np.allclose(scatter_add(idx, fbar_e, model.n_nodes), ev.fbar_int, atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.05))
@settings(max_examples=15, deadline=None)
def test_phase_residual_conserves_mass(seed, dx):
    sc, model = _torus_cached()
    x, v, phi = random_state(sc, seed, dx)
    fbar = model.evaluate(x, v, phi, tangent=False).fbar_int
    assert abs(fbar.sum()) <= 1e-12 * max(1.0, np.abs(fbar).sum())


_cache = {}


def _torus_cached():
    if "t" not in _cache:
        sc = build_torus(R=R, r=r, n_u=16, n_v=8, params=PARAMS, p_int=0.1)
        _cache["t"] = (sc, sc.model())
    return _cache["t"]


@given(st.lists(st.floats(-np.pi, np.pi), min_size=3, max_size=3),
       st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.lists(st.floats(-1, 1), min_size=3, max_size=3),
       st.floats(0.1, 0.9))
@settings(max_examples=20, deadline=None)
def test_rigid_motion_with_uniform_phase_is_force_free(angles, shift, omega, phi_val):
    sc, model = _torus_cached()
    Q = Rotation.from_euler("xyz", angles).as_matrix()
    x = sc.X @ Q.T + np.asarray(shift)
    v = np.cross(np.asarray(omega), x)                   # rigid angular velocity
    phi = np.full(model.n_nodes, phi_val)
    ev = model.evaluate(x, v, phi, tangent=False)
    scale = PARAMS.K0 * model.reference_area
    assert np.abs(ev.f_int).max() <= 1e-10 * scale
    assert np.abs(ev.fbar_int).max() <= 1e-12


def test_follower_pressure_is_self_equilibrated_and_does_volume_work(torus):
    sc, model = torus
    ev = model.evaluate(sc.X, None, sc.phi0, tangent=False)
    p = model.pressure
    assert np.abs(ev.f_ext.sum(axis=0)).max() < 1e-12
    # sum_I f_I . x_I = p int n . x dA = 3 p V for a closed surface
    vol = np.sum(ev.f_ext * sc.X) / (3 * p)
    assert abs(vol - 2 * np.pi ** 2 * R * r ** 2) / (2 * np.pi ** 2 * R * r ** 2) < 5e-3


def test_mass_matrix_and_species_mass(torus):
    sc, model = torus
    area = model.reference_area
    assert abs(area - 4 * np.pi ** 2 * R * r) / (4 * np.pi ** 2 * R * r) < 5e-3
    M = model.mass_matrix()
    assert abs(M.sum() - 3 * PARAMS.rho * area) < 1e-10
    assert abs(M - M.T).max() < 1e-15
    assert np.linalg.eigvalsh(model.mass_scalar.toarray()).min() > 0
    assert np.isclose(model.species_mass(np.ones(model.n_nodes)), PARAMS.rho * area)
    phi = np.random.default_rng(0).uniform(0.2, 0.8, model.n_nodes)
    quad = np.sum(np.einsum("eqn,en->eq", model.tab.N, phi[model.tab.indices]) * model.dA)
    assert np.isclose(model.species_mass(phi), PARAMS.rho * quad, rtol=1e-13)


def test_reference_state_energy(torus):
    sc, model = torus
    e = model.energies(sc.X, np.full(model.n_nodes, 0.4))
    assert abs(e["psi_el"]) < 1e-14
    assert e["phi_min"] == pytest.approx(0.4) and e["phi_max"] == pytest.approx(0.4)


def test_rigid_model_phase_tangent_matches_full_model():
    sc = build_torus(R=R, r=r, n_u=16, n_v=8, params=PARAMS, rigid=True)
    rigid = sc.model()
    full_sc = build_torus(R=R, r=r, n_u=16, n_v=8, params=PARAMS)
    full = full_sc.model()
    phi = random_state(sc, 2)[2]
    a = rigid.evaluate(sc.X, None, phi, mechanics=False)
    b = full.evaluate(sc.X, None, phi)
    assert np.allclose(a.fbar_int, b.fbar_int, atol=1e-13)
    assert np.allclose(a.k_pp, b.k_pp, atol=1e-12)
    assert rigid.element_matrices(a, 1.0, 0.0, 0.0, 2.0).shape == a.k_pp.shape


def test_dofmap_restrict_expand_round_trip():
    dm = DofMap(5, np.array([4, 0, 2, 2]))
    assert np.array_equal(dm.fixed, [0, 2, 4])
    assert dm.n_free_mech == 12 and dm.n_free == 17
    rng = np.random.default_rng(0)
    u = rng.standard_normal(dm.n_free)
    dx, dphi = dm.expand(u)
    assert np.all(dx.reshape(-1)[dm.fixed] == 0)
    assert np.array_equal(dm.restrict(dx, dphi), u)
    assert np.all(dm.reduced[dm.fixed] == -1)
    rigid = DofMap(5, [], mechanics=False)
    assert rigid.n_free == 5 and np.array_equal(rigid.restrict(None, dphi), dphi)
    with pytest.raises(ValueError):
        DofMap(2, [6])


def test_sparse_assembler_matches_dense_scatter():
    rng = np.random.default_rng(1)
    dm = DofMap(6, [1, 7])
    elem = np.array([[0, 1, 2, 3, 18, 19], [3, 4, 5, 6, 19, 20], [6, 7, 8, 0, 20, 18]])
    mats = rng.standard_normal((3, 6, 6))
    dense = np.zeros((24, 24))
    for e in range(3):
        dense[np.ix_(elem[e], elem[e])] += mats[e]
    keep = np.flatnonzero(dm.reduced >= 0)
    order = np.argsort(dm.reduced[keep])
    ref = dense[np.ix_(keep[order], keep[order])]
    K = SparseAssembler(dm, elem).matrix(mats)
    assert np.allclose(K.toarray(), ref, atol=1e-14)


def test_scatter_add_matches_add_at():
    rng = np.random.default_rng(2)
    idx = rng.integers(0, 10, (7, 4))
    vals = rng.standard_normal((7, 4, 3))
    ref = np.zeros((10, 3))
    np.add.at(ref, idx, vals)
    assert np.allclose(scatter_add(idx, vals, 10), ref)
