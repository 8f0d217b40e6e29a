from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chshell.constitutive import MaterialParams
from chshell.integrator import (GeneralizedAlpha, IntegratorConfig, SimulationAbort,
                                alpha_params, control_step, error_constants)
from chshell.scenarios import build_square, build_torus

CFG = IntegratorConfig()


def test_exact_constants_at_half():
    half = Fraction(1, 2)
    assert alpha_params(half) == (Fraction(2, 3), Fraction(1), Fraction(5, 6), Fraction(4, 9))
    assert error_constants(half) == (Fraction(4, 9), 0, Fraction(5, 6), Fraction(1, 8))


@given(st.fractions(0, 1).filter(lambda r: r > 0))
def test_alpha_family_is_second_order_and_stable(rho):
    af, am, gamma, beta = alpha_params(rho)
    assert gamma == Fraction(1, 2) + am - af
    assert beta == (1 + am - af) ** 2 / 4
    assert am >= af >= Fraction(1, 2)
    c1d, c2d, c1p, c2p = error_constants(rho)
    if rho == 1:
        assert c2d == 0 and c2p == 0


def test_invalid_spectral_radius():
    with pytest.raises(ValueError):
        alpha_params(1.5)
    with pytest.raises(ValueError):
        IntegratorConfig(rho_inf=-0.1)
    with pytest.raises(ValueError):
        error_constants(0)
    with pytest.raises(ValueError):
        IntegratorConfig(dt_min=1.0, dt_max=0.5)


errs = st.floats(1e-12, 1e-4)


@given(st.floats(1e-6, 1e-2), errs, errs)
@settings(max_examples=200)
def test_control_step_formula(dt, ep, ed):
    ok, dt_next = control_step(dt, ep, ed, CFG)
    assert ok
    expected = dt * 0.8 * min(np.sqrt(7.5e-5 / ep), np.sqrt(7.5e-5 / ed))
    assert dt_next == min(max(expected, CFG.dt_min), CFG.dt_max)


def test_control_step_rejection_and_clamps():
    assert control_step(1e-3, 1e-4, 1e-4, CFG)[0]                     # boundary accepted
    ok, dt_next = control_step(1e-3, 2e-4, 1e-6, CFG)
    assert not ok and dt_next == pytest.approx(1e-3 * 0.8 * np.sqrt(7.5e-5 / 2e-4))
    assert not control_step(1e-3, 1e-6, 1.0001e-4, CFG)[0]
    assert control_step(0.2, 0.0, 0.0, CFG) == (True, CFG.dt_max)
    ok, dt_next = control_step(1e-3, 1.0, 0.0, CFG)                     # shrink is bounded
    assert not ok and dt_next == pytest.approx(1e-4)


@pytest.fixture(scope="module")
def small_square():
    cfg = IntegratorConfig(dt0=1e-4, dt_max=0.25)
    return build_square(n_elems=8, lam=1 / 300, D=1.0, phi_bar=0.5, amplitude=0.1,
                        integrator=cfg)


def test_short_rigid_run_conserves_mass_and_dissipates(small_square):
    sc = small_square
    model = sc.model()
    ga = GeneralizedAlpha(model, sc.integrator)
    s = ga.initial_state(sc.X, sc.phi0)
    m0 = model.species_mass(s.phi)
    assert abs(np.sum(model.mass_scalar @ s.phid)) < 1e-12         # consistent initial rate
    psi = [model.energies(s.x, s.phi)["psi_total"]]
    for _ in range(15):
        s, rep = ga.advance(s)
        assert rep.accepted and rep.err_p <= CFG.reject and rep.err_d == 0.0
        psi.append(model.energies(s.x, s.phi)["psi_total"])
        assert abs(model.species_mass(s.phi) - m0) <= 1e-12 * abs(m0)
        assert np.array_equal(s.x, sc.X)
    assert np.all(np.diff(psi) <= 1e-10 * abs(psi[0]))
    assert s.step == 15 and s.t > 0


def test_step_does_not_modify_input_state(small_square):
    sc = small_square
    ga = GeneralizedAlpha(sc.model(), sc.integrator)
    s = ga.initial_state(sc.X, sc.phi0)
    before = s.copy()
    ga.advance(s)
    assert np.array_equal(s.phi, before.phi) and s.t == before.t and s.step == 0


def test_retry_limit_aborts(small_square):
    sc = small_square
    cfg = IntegratorConfig(reject=1e-30, max_retries=0)
    ga = GeneralizedAlpha(sc.model(), cfg)
    with pytest.raises(SimulationAbort):
        ga.advance(ga.initial_state(sc.X, sc.phi0))


def test_minimum_step_aborts(small_square):
    sc = small_square
    cfg = IntegratorConfig(reject=1e-30, dt0=1e-4, dt_min=5e-5, max_shrink=1.5, max_retries=50)
    ga = GeneralizedAlpha(sc.model(), cfg)
    with pytest.raises(SimulationAbort, match="minimum time step"):
        ga.advance(ga.initial_state(sc.X, sc.phi0))


def test_equilibrium_state_stays_at_rest():
    params = MaterialParams.two_phase(lam=0.075, D=4.0)
    sc = build_torus(n_u=16, n_v=4, params=params, p_int=0.0)
    ga = GeneralizedAlpha(sc.model(), IntegratorConfig(dt0=1e-2, dt_max=2.5))
    s = ga.initial_state(sc.X, np.full(sc.X.shape[0], 0.4))
    for _ in range(3):
        s, rep = ga.advance(s)
    assert np.abs(s.x - sc.X).max() < 1e-12 and np.abs(s.phi - 0.4).max() < 1e-12
    assert rep.err_p < 1e-12 and rep.err_d < 1e-12
    assert s.dt == 2.5
