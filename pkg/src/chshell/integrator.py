"""Monolithic generalized-alpha integration with adaptive step control.

Intermediate states use the convention ``y_{n+a} = y_n + a (y_{n+1} - y_n)``
with ``alpha_f = 1 / (1 + rho)`` and ``alpha_m = (2 - rho) / (1 + rho)``.
The mechanical equation is second order in time, the phase equation first
order; both share the same parameters and the same Newton loop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .assembly import ShellModel
from .constitutive import InvertedElementError, PhaseDomainError
from .geometry import SingularGeometryError

log = logging.getLogger(__name__)


class StepFailure(ArithmeticError):
    """A time step could not be completed (Newton or domain failure)."""


class SimulationAbort(RuntimeError):
    """Retry limit exceeded or step size fell below the minimum."""


def alpha_params(rho_inf):
    """Return ``(alpha_f, alpha_m, gamma, beta)``.

    Works with floats or :class:`fractions.Fraction` for exact arithmetic.
    """
    if not 0 <= rho_inf <= 1:
        raise ValueError(f"rho_inf must lie in [0, 1], got {rho_inf}")
    one = rho_inf * 0 + 1
    alpha_f = one / (1 + rho_inf)
    alpha_m = (2 - rho_inf) / (1 + rho_inf)
    gamma = one / 2 + alpha_m - alpha_f
    beta = (1 + alpha_m - alpha_f) ** 2 / 4
    return alpha_f, alpha_m, gamma, beta


def error_constants(rho_inf):
    """Return ``(c1_d, c2_d, c1_p, c2_p)`` of the truncation error estimates.

    The estimates divide by ``1 - alpha_f``, which vanishes at ``rho_inf = 0``.
    """
    if rho_inf == 0:
        raise ValueError("error estimates are undefined for rho_inf = 0")
    af, am, gamma, beta = alpha_params(rho_inf)
    one = rho_inf * 0 + 1
    c1d = beta - (1 - am) / (6 * (1 - af))
    c2d = (1 + rho_inf) * (1 - rho_inf) * (one / 6 - (1 - af) / 2)
    c1p = gamma - (1 - am) / (2 * (1 - af))
    c2p = (1 + rho_inf) * (1 - rho_inf) * (one / 2 - 1 + af)
    return c1d, c2d, c1p, c2p


@dataclass(frozen=True)
class IntegratorConfig:
    rho_inf: float = 0.5
    tol_newton: float = 1e-4
    newton_floor: float = 1e-14
    max_newton: int = 15
    tol_p: float = 7.5e-5
    tol_d: float = 7.5e-5
    reject: float = 1e-4
    safety: float = 0.8
    dt0: float = 1e-4
    dt_min: float = 1e-12
    dt_max: float = 0.25
    max_retries: int = 8
    max_shrink: float = 10.0
    newton_shrink: float = 0.25

    def __post_init__(self):
        error_constants(self.rho_inf)
        for name in ("tol_newton", "tol_p", "tol_d", "reject", "safety", "dt0", "dt_min",
                     "dt_max", "max_shrink"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.dt_min > self.dt_max:
            raise ValueError("dt_min exceeds dt_max")
        if self.max_newton < 1 or self.max_retries < 0:
            raise ValueError("invalid iteration limits")

    @property
    def params(self):
        return alpha_params(self.rho_inf)


@dataclass
class SimState:
    t: float
    dt: float
    x: np.ndarray
    v: np.ndarray
    a: np.ndarray
    phi: np.ndarray
    phid: np.ndarray
    hist_d: np.ndarray
    hist_p: np.ndarray
    step: int = 0

    def copy(self) -> "SimState":
        return SimState(self.t, self.dt, self.x.copy(), self.v.copy(), self.a.copy(),
                        self.phi.copy(), self.phid.copy(), self.hist_d.copy(),
                        self.hist_p.copy(), self.step)


@dataclass
class StepReport:
    accepted: bool
    step: int
    t: float
    dt: float
    dt_next: float
    newton_iters: int
    err_p: float
    err_d: float
    retries: int
    limiter: str
    energies: dict = field(default_factory=dict)
    mass: float = 0.0


def control_step(dt: float, err_p: float, err_d: float, config: IntegratorConfig):
    """Return ``(accepted, dt_next)`` from the normalized error estimates."""
    def ratio(tol, err):
        return np.inf if err == 0 else np.sqrt(tol / err)

    accepted = err_p <= config.reject and err_d <= config.reject
    dt_next = dt * config.safety * min(ratio(config.tol_p, err_p), ratio(config.tol_d, err_d))
    if not accepted:
        # a rejected step never grows, even when reject < tol
        dt_next = min(max(dt_next, dt / config.max_shrink), config.safety * dt)
    return accepted, float(min(max(dt_next, config.dt_min), config.dt_max))


class GeneralizedAlpha:
    """Time stepper for a :class:`ShellModel`."""

    def __init__(self, model: ShellModel, config: IntegratorConfig):
        self.model = model
        self.config = config
        self.af, self.am, self.gamma, self.beta = config.params
        self.consts = error_constants(config.rho_inf)
        self.mechanics = model.dofmap.mechanics
        if not self.mechanics:
            model.freeze_geometry(True)

    # -- setup --------------------------------------------------------------------

    def initial_state(self, x0: np.ndarray, phi0: np.ndarray, t: float = 0.0,
                      dt: float | None = None) -> SimState:
        """Consistent initial rates: zero velocity, accelerations from equilibrium."""
        model = self.model
        x0 = np.array(x0, dtype=float)
        phi0 = np.array(phi0, dtype=float)
        v0 = np.zeros_like(x0)
        ev = model.evaluate(x0, v0, phi0, tangent=False, mechanics=self.mechanics)
        a0 = np.zeros_like(x0)
        if self.mechanics:
            dm = model.dofmap
            Mfree = model.mass_matrix()[dm.free_mech][:, dm.free_mech].tocsc()
            rhs = (ev.f_ext - ev.f_int).reshape(-1)[dm.free_mech]
            a0.reshape(-1)[dm.free_mech] = spla.spsolve(Mfree, rhs)
        phid0 = spla.spsolve(model.mass_scalar.tocsc(), -ev.fbar_int)
        return SimState(t, self.config.dt0 if dt is None else dt, x0, v0, a0, phi0, phid0,
                        np.zeros(x0.size), np.zeros(phi0.size), 0)

    # -- single step pieces -------------------------------------------------------

    def predict(self, s: SimState, dt: float):
        g, b = self.gamma, self.beta
        a = s.a * (g - 1) / g
        v = s.v.copy()
        x = s.x + dt * s.v + dt * dt * ((0.5 - b) * s.a + b * a)
        phid = s.phid * (g - 1) / g
        phi = s.phi.copy()
        return x, v, a, phi, phid

    def _intermediate(self, s: SimState, x, v, a, phi, phid):
        af, am = self.af, self.am
        return (s.x + af * (x - s.x), s.v + af * (v - s.v), s.a + am * (a - s.a),
                s.phi + af * (phi - s.phi), s.phid + am * (phid - s.phid))

    def residual(self, s: SimState, guess, tangent: bool):
        model = self.model
        xm, vm, am_, pm, pdm = self._intermediate(s, *guess)
        ev = model.evaluate(xm, vm, pm, tangent=tangent, mechanics=self.mechanics)
        fbar = model.mass_scalar @ pdm + ev.fbar_int
        if self.mechanics:
            f = (model.mass_scalar @ am_) + ev.f_int - ev.f_ext
            f = f.reshape(-1)[model.dofmap.free_mech]
        else:
            f = np.zeros(0)
        return f, fbar, ev

    def newton(self, s: SimState, dt: float):
        """Newton-Raphson corrector; returns the converged guess and iteration count."""
        cfg = self.config
        af, am, g, b = self.af, self.am, self.gamma, self.beta
        guess = list(self.predict(s, dt))
        dm = self.model.dofmap
        norms0 = None
        growth = 0
        last = np.inf
        for it in range(cfg.max_newton + 1):
            try:
                f, fbar, ev = self.residual(s, guess, tangent=True)
            except (PhaseDomainError, SingularGeometryError, InvertedElementError) as exc:
                raise StepFailure(str(exc)) from exc
            nf, nfb = np.linalg.norm(f), np.linalg.norm(fbar)
            if not (np.isfinite(nf) and np.isfinite(nfb)):
                raise StepFailure("non-finite residual")
            if norms0 is None:
                norms0 = (nf, nfb)
            rel = max(nf / norms0[0] if norms0[0] > 0 else 0.0,
                      nfb / norms0[1] if norms0[1] > 0 else 0.0)
            conv_f = nf <= max(cfg.tol_newton * norms0[0], cfg.newton_floor)
            conv_p = nfb <= max(cfg.tol_newton * norms0[1], cfg.newton_floor)
            if it > 0 and conv_f and conv_p:
                return guess, it
            if it == cfg.max_newton:
                break
            if it > 0:
                growth = growth + 1 if rel > last else 0
                if growth >= 3:
                    raise StepFailure("Newton residual grew for 3 consecutive iterations")
            last = rel
            K = self.model.assembler.matrix(self.model.element_matrices(
                ev, af, af * g / (b * dt), am / (b * dt * dt), am / (g * dt)))
            rhs = -np.concatenate([f, fbar])
            try:
                du = spla.spsolve(K.tocsc(), rhs, permc_spec="MMD_AT_PLUS_A")
            except RuntimeError as exc:
                raise StepFailure(f"linear solve failed: {exc}") from exc
            if not np.all(np.isfinite(du)):
                raise StepFailure("singular tangent")
            dx, dphi = dm.expand(du)
            guess[0] = guess[0] + dx
            guess[1] = guess[1] + (g / (b * dt)) * dx
            guess[2] = guess[2] + dx / (b * dt * dt)
            guess[3] = guess[3] + dphi
            guess[4] = guess[4] + dphi / (g * dt)
        raise StepFailure(f"Newton did not converge in {cfg.max_newton} iterations")

    def truncation_errors(self, s: SimState, guess, dt: float):
        """Normalized error estimates and the updated history vectors."""
        c1d, c2d, c1p, c2p = self.consts
        rho = self.config.rho_inf
        dacc = (guess[2] - s.a).reshape(-1)
        drate = guess[4] - s.phid
        e_d = dt * dt * (c1d * dacc + c2d * s.hist_d)
        e_p = dt * (c1p * drate + c2p * s.hist_p)
        nx = np.linalg.norm(s.x)
        nphi = np.linalg.norm(s.phi)
        err_d = float(np.linalg.norm(e_d) / nx) if self.mechanics and nx > 0 else 0.0
        err_p = float(np.linalg.norm(e_p) / nphi) if nphi > 0 else 0.0
        return err_p, err_d, dacc - rho * s.hist_d, drate - rho * s.hist_p

    # -- driver -------------------------------------------------------------------

    def advance(self, s: SimState) -> tuple[SimState, StepReport]:
        """Take one accepted step (with retries); ``s`` is left untouched."""
        cfg = self.config
        dt = s.dt
        retries = 0
        while True:
            if dt < cfg.dt_min * (1 - 1e-12):
                raise SimulationAbort(f"time step {dt:.3e} below minimum {cfg.dt_min:.3e}")
            try:
                guess, iters = self.newton(s, dt)
            except StepFailure as exc:
                log.info("step %d: Newton failure at dt=%.3e (%s)", s.step + 1, dt, exc)
                retries += 1
                if retries > cfg.max_retries:
                    raise SimulationAbort(f"retry limit exceeded at t={s.t}: {exc}") from exc
                dt = max(dt * cfg.newton_shrink, cfg.dt_min)
                continue
            err_p, err_d, hd, hp = self.truncation_errors(s, guess, dt)
            accepted, dt_next = control_step(dt, err_p, err_d, cfg)
            if accepted:
                break
            log.info("step %d: rejected dt=%.3e err_p=%.2e err_d=%.2e", s.step + 1, dt, err_p, err_d)
            if dt <= cfg.dt_min:
                raise SimulationAbort(f"step rejected at the minimum time step {cfg.dt_min:.3e}")
            retries += 1
            if retries > cfg.max_retries:
                raise SimulationAbort(f"retry limit exceeded at t={s.t}")
            dt = dt_next
        x, v, a, phi, phid = guess
        new = SimState(s.t + dt, dt_next, x, v, a, phi, phid, hd, hp, s.step + 1)
        limiter = "p" if err_p / cfg.tol_p >= err_d / cfg.tol_d else "d"
        report = StepReport(True, new.step, new.t, dt, dt_next, iters, err_p, err_d, retries,
                            limiter)
        return new, report

    def diagnostics(self, s: SimState) -> tuple[dict, float]:
        en = self.model.energies(s.x, s.phi)
        return en, self.model.species_mass(s.phi)
