"""Dimensionless constitutive model: energies, stresses, moments, potentials.

Units: energies per reference area in Psi0, lengths in L0, times in T0.
Stress-like outputs are provided both as ``sigma`` (per current area) and
``tau = J sigma`` (per reference area, used by the weak forms).  Moments
follow the same convention with ``M0 = J M``.

All functions broadcast over arbitrary leading dimensions.  Tensor
arguments carry two trailing indices ``(..., 2, 2)``; surface gradients of
``phi`` are covariant components ``phi_{;alpha}`` with shape ``(..., 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

PHI_EPS = 1e-9


class PhaseDomainError(ArithmeticError):
    """phi left the open interval (0, 1); the time step should be retried."""


class InvertedElementError(ArithmeticError):
    """Non-positive area stretch."""


@dataclass(frozen=True)
class MaterialParams:
    """Dimensionless material constants.

    ``omega`` and ``theta`` are N*omega and N*k_B*T.  The critical
    temperature corresponds to ``theta = omega / 2``.
    """

    K0: float
    K1: float
    G0: float
    G1: float
    c0: float
    c1: float
    eta0: float
    eta1: float
    rho_sh: float = 1.25
    D: float = 1.0
    lam: float = 0.075
    omega: float = 1.0
    theta: float = 1.0 / 3.0
    rho: float = 1.0

    def __post_init__(self):
        for name in ("K0", "K1", "G0", "G1", "c0", "c1", "eta0", "eta1", "D"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.lam > 0:
            raise ValueError(f"lam must be > 0, got {self.lam}")
        if not self.rho > 0:
            raise ValueError(f"rho must be > 0, got {self.rho}")
        if not (self.theta > 0 and self.omega >= 0):
            raise ValueError(f"need theta > 0 and omega >= 0, got {self.theta}, {self.omega}")

    @property
    def separating(self) -> bool:
        """True below the critical temperature, where the mixing energy is a double well."""
        return self.theta < self.omega / 2

    @classmethod
    def two_phase(cls, E: float = 1.0, nu: float = 0.3, **overrides) -> "MaterialParams":
        """Standard two-phase parameter set (stiff phase 0, soft phase 1)."""
        bulk = E * nu / ((1 + nu) * (1 - 2 * nu))
        shear = E / (2 * (1 + nu))
        base = dict(K0=1.25 * bulk, K1=0.0375 * bulk, G0=6.25 * shear, G1=0.375 * shear,
                    c0=0.01 * E, c1=0.0001875 * E, eta0=1.5 * 1.25 * bulk,
                    eta1=1.5 * 1.25 * bulk)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "MaterialParams":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(changes)
        return MaterialParams(**vals)

    @property
    def kappa(self) -> float:
        """Interface coefficient N*omega*lambda."""
        return self.omega * self.lam


# ---------------------------------------------------------------------------
# Scalar laws
# ---------------------------------------------------------------------------

def mixture_fraction(phi, rho_sh: float = 1.25):
    """Return ``f, f', f''`` of the tanh mixture rule."""
    t = np.tanh(-rho_sh * np.pi + 4 * np.pi * np.asarray(phi, dtype=float))
    f = 0.5 * (1 + t)
    f1 = 2 * np.pi * (1 - t * t)
    f2 = -16 * np.pi ** 2 * t * (1 - t * t)
    return f, f1, f2


@dataclass(frozen=True)
class Moduli:
    K: np.ndarray
    G: np.ndarray
    c: np.ndarray
    eta: np.ndarray
    dK: np.ndarray
    dG: np.ndarray
    dc: np.ndarray
    deta: np.ndarray
    d2K: np.ndarray
    d2G: np.ndarray
    d2c: np.ndarray


def moduli(phi, params: MaterialParams) -> Moduli:
    f, f1, f2 = mixture_fraction(phi, params.rho_sh)
    p = params

    def mix(x0, x1):
        return x1 * f + x0 * (1 - f), (x1 - x0) * f1, (x1 - x0) * f2

    K, dK, d2K = mix(p.K0, p.K1)
    G, dG, d2G = mix(p.G0, p.G1)
    c, dc, d2c = mix(p.c0, p.c1)
    eta, deta, _ = mix(p.eta0, p.eta1)
    return Moduli(K, G, c, eta, dK, dG, dc, deta, d2K, d2G, d2c)


def mobility(phi, D: float):
    phi = np.asarray(phi, dtype=float)
    return D * phi * (1 - phi), D * (1 - 2 * phi), np.full_like(phi, -2.0 * D)


def check_phase(phi) -> None:
    phi = np.asarray(phi)
    if np.any(~(phi > PHI_EPS)) or np.any(~(phi < 1 - PHI_EPS)):
        ok = phi[np.isfinite(phi)]
        lo, hi = (float(ok.min()), float(ok.max())) if ok.size else (np.nan, np.nan)
        raise PhaseDomainError(f"phi outside ({PHI_EPS}, 1 - {PHI_EPS}): range [{lo}, {hi}]")


def mixing_energy(phi, params: MaterialParams):
    check_phase(phi)
    phi = np.asarray(phi, dtype=float)
    return (params.omega * phi * (1 - phi)
            + params.theta * (phi * np.log(phi) + (1 - phi) * np.log(1 - phi)))


def mixing_potential(phi, params: MaterialParams):
    """Return ``mu_phi`` and its first two derivatives."""
    check_phase(phi)
    phi = np.asarray(phi, dtype=float)
    q = phi * (1 - phi)
    mu = params.theta * np.log(phi / (1 - phi)) + params.omega * (1 - 2 * phi)
    dmu = params.theta / q - 2 * params.omega
    d2mu = -params.theta * (1 - 2 * phi) / q ** 2
    return mu, dmu, d2mu


# ---------------------------------------------------------------------------
# Kinematic invariants
# ---------------------------------------------------------------------------

def inv2(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    out = np.empty_like(m)
    out[..., 0, 0] = m[..., 1, 1] / det
    out[..., 1, 1] = m[..., 0, 0] / det
    out[..., 0, 1] = -m[..., 0, 1] / det
    out[..., 1, 0] = -m[..., 1, 0] / det
    return out, det


@dataclass(frozen=True)
class Kinematics:
    """Reference (upper-case) and current (lower-case) surface tensors."""

    A_inv: np.ndarray
    B: np.ndarray
    a: np.ndarray
    b: np.ndarray
    a_inv: np.ndarray
    J: np.ndarray
    I1: np.ndarray

    @classmethod
    def from_tensors(cls, A_inv, B, a, b) -> "Kinematics":
        a = np.asarray(a, dtype=float)
        a_inv, det = inv2(a)
        _, detA_inv = inv2(np.asarray(A_inv, dtype=float))
        J2 = det * detA_inv
        if np.any(~(J2 > 0)):
            raise InvertedElementError("non-positive area stretch")
        I1 = np.einsum("...ab,...ab->...", A_inv, a)
        return cls(np.asarray(A_inv, float), np.asarray(B, float), a,
                   np.asarray(b, float), a_inv, np.sqrt(J2), I1)

    @classmethod
    def from_geometry(cls, ref, cur) -> "Kinematics":
        kin = cls.from_tensors(ref.metric_inv, ref.curvature, cur.metric, cur.curvature)
        return kin


def _sym4(x):
    """a^{ag} a^{bd} + a^{ad} a^{bg} as (..., a, b, g, d)."""
    return np.einsum("...ag,...bd->...abgd", x, x) + np.einsum("...ad,...bg->...abgd", x, x)


# ---------------------------------------------------------------------------
# Stresses, moments, potentials
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StressState:
    """Stress contributions (per current area) and the bending moment."""

    sigma_el: np.ndarray
    sigma_visc: np.ndarray
    sigma_ch: np.ndarray
    moment: np.ndarray
    J: np.ndarray
    bend_correction: np.ndarray  # b^beta_gamma M^{gamma alpha}

    @property
    def sigma(self) -> np.ndarray:
        return self.sigma_el + self.sigma_visc + self.sigma_ch

    @property
    def total(self) -> np.ndarray:
        """N^{ab} = sigma^{ab} + b^b_g M^{ga}."""
        return self.sigma + self.bend_correction

    @property
    def tau(self) -> np.ndarray:
        return self.J[..., None, None] * self.sigma

    @property
    def moment0(self) -> np.ndarray:
        return self.J[..., None, None] * self.moment


def _phi_grad_terms(kin: Kinematics, dphi):
    g = np.einsum("...ab,...b->...a", kin.a_inv, dphi)
    s = np.einsum("...a,...a->...", g, dphi)
    return g, s


def elastic_tau(kin: Kinematics, mod: Moduli, derivative: bool = False):
    """``tau_el`` (or its phi-derivative through the moduli)."""
    K, G = (mod.dK, mod.dG) if derivative else (mod.K, mod.G)
    J, I1 = kin.J, kin.I1
    return (0.5 * K * (J * J - 1))[..., None, None] * kin.a_inv \
        + (0.5 * G / J)[..., None, None] * (2 * kin.A_inv - I1[..., None, None] * kin.a_inv)


def korteweg_tau(kin: Kinematics, dphi, params: MaterialParams):
    g, s = _phi_grad_terms(kin, dphi)
    return (0.5 * params.kappa * kin.J)[..., None, None] * (
        s[..., None, None] * kin.a_inv - 2 * np.einsum("...a,...b->...ab", g, g))


def viscous_tau(kin: Kinematics, eta, adot):
    """``J eta a^{ag} adot_{gd} a^{db}`` (``adot`` covariant)."""
    V = kin.a_inv @ adot @ kin.a_inv
    return (kin.J * eta)[..., None, None] * V


def moment0(kin: Kinematics, c):
    """``M0 = J M = c (A b A - B^{..})``."""
    AbA = kin.A_inv @ (kin.b - kin.B) @ kin.A_inv
    return np.asarray(c)[..., None, None] * AbA


def membrane_stress(kin: Kinematics, phi, dphi, adot, params: MaterialParams,
                    mod: Moduli | None = None) -> StressState:
    """Stress contributions and moment for a state.

    ``adot`` is the covariant metric rate ``adot_{ab}`` (zeros when static).
    """
    mod = mod if mod is not None else moduli(phi, params)
    J = kin.J
    if np.any(~(J > 0)):
        raise InvertedElementError("non-positive area stretch")
    inv_J = (1.0 / J)[..., None, None]
    sig_el = elastic_tau(kin, mod) * inv_J
    sig_v = viscous_tau(kin, mod.eta, adot) * inv_J
    g, s = _phi_grad_terms(kin, dphi)
    sig_ch = (0.5 * params.kappa) * (s[..., None, None] * kin.a_inv
                                     - 2 * np.einsum("...a,...b->...ab", g, g))
    M = moment0(kin, mod.c) * inv_J
    # b^b_g M^{ga} = a^{bd} b_{dg} M^{ga}, stored with index order (a, b)
    corr = (kin.a_inv @ kin.b @ M).swapaxes(-1, -2)
    return StressState(sig_el, sig_v, sig_ch, M, J, corr)


def bending_moment(kin: Kinematics, phi, params: MaterialParams):
    """Return ``(M, N_correction)``: moment per current area and ``b^b_g M^{ga}``."""
    mod = moduli(phi, params)
    M = moment0(kin, mod.c) / kin.J[..., None, None]
    corr = (kin.a_inv @ kin.b @ M).swapaxes(-1, -2)
    return M, corr


def elastic_energy_parts(kin: Kinematics, mod_values):
    """Dilatational, deviatoric and bending bracket terms (without moduli)."""
    J, I1 = kin.J, kin.I1
    dil = 0.25 * (J * J - 1 - 2 * np.log(J))
    dev = 0.5 * (I1 / J - 2)
    db = kin.b - kin.B
    m = kin.A_inv @ db
    bend = 0.5 * np.einsum("...ab,...ba->...", m, m)
    return dil, dev, bend


@dataclass(frozen=True)
class ChemicalPotential:
    mu_phi: np.ndarray
    dmu_phi: np.ndarray
    d2mu_phi: np.ndarray
    mu_el: np.ndarray
    dmu_el: np.ndarray
    mu_i: np.ndarray


def chemical_potential(kin: Kinematics, phi, lap_phi, params: MaterialParams,
                       mod: Moduli | None = None) -> ChemicalPotential:
    mu, dmu, d2mu = mixing_potential(phi, params)
    mod = mod if mod is not None else moduli(phi, params)
    dil, dev, bend = elastic_energy_parts(kin, mod)
    mu_el = mod.dK * dil + mod.dG * dev + mod.dc * bend
    dmu_el = mod.d2K * dil + mod.d2G * dev + mod.d2c * bend
    mu_i = -kin.J * params.kappa * np.asarray(lap_phi, dtype=float)
    return ChemicalPotential(mu, dmu, d2mu, mu_el, dmu_el, mu_i)


@dataclass(frozen=True)
class EnergyDensity:
    dil: np.ndarray
    dev: np.ndarray
    bend: np.ndarray
    mix: np.ndarray
    interface: np.ndarray

    @property
    def el(self):
        return self.dil + self.dev + self.bend

    @property
    def ch(self):
        return self.mix + self.interface

    @property
    def total(self):
        return self.el + self.ch


def energy_density(kin: Kinematics, phi, dphi, params: MaterialParams,
                   mod: Moduli | None = None) -> EnergyDensity:
    """Helmholtz energy per reference area, split by contribution."""
    mod = mod if mod is not None else moduli(phi, params)
    dil, dev, bend = elastic_energy_parts(kin, mod)
    _, s = _phi_grad_terms(kin, dphi)
    return EnergyDensity(mod.K * dil, mod.G * dev, mod.c * bend,
                         mixing_energy(phi, params), 0.5 * params.kappa * kin.J * s)


@dataclass(frozen=True)
class StressPhiDerivatives:
    dtau_dphi: np.ndarray    # (..., 2, 2)
    dtau_dgrad: np.ndarray   # (..., 2, 2, 2) last index gamma of phi_{;gamma}
    dM0_dphi: np.ndarray     # (..., 2, 2)


def stress_phi_derivatives(kin: Kinematics, phi, dphi, adot, params: MaterialParams,
                           mod: Moduli | None = None) -> StressPhiDerivatives:
    mod = mod if mod is not None else moduli(phi, params)
    dtau = elastic_tau(kin, mod, derivative=True) + viscous_tau(kin, mod.deta, adot)
    ai = kin.a_inv
    g = np.einsum("...ab,...b->...a", ai, dphi)
    # d tau_CH^{ab} / d phi_{;c} = J kappa (a^{ab} g^c - a^{ac} g^b - g^a a^{bc})
    dgrad = (params.kappa * kin.J)[..., None, None, None] * (
        np.einsum("...ab,...c->...abc", ai, g)
        - np.einsum("...ac,...b->...abc", ai, g)
        - np.einsum("...a,...bc->...abc", g, ai))
    return StressPhiDerivatives(dtau, dgrad, moment0(kin, mod.dc))


def material_tangent(kin: Kinematics, phi, dphi, adot, params: MaterialParams,
                     mod: Moduli | None = None):
    """``C = d tau / d a_{gd}`` at fixed ``adot``, and ``D = d tau_visc / d adot_{gd}``.

    Both have shape ``(..., 2, 2, 2, 2)`` ordered ``(a, b, g, d)`` and are
    symmetric in ``(g, d)``.
    """
    mod = mod if mod is not None else moduli(phi, params)
    ai = kin.a_inv
    J, I1 = kin.J, kin.I1
    K, G, eta = mod.K, mod.G, mod.eta
    S = _sym4(ai)
    aa = np.einsum("...ab,...gd->...abgd", ai, ai)

    def e(x):
        return np.asarray(x)[..., None, None, None, None]

    C = (e(0.5 * K * J * J) * aa
         - e(0.25 * K * (J * J - 1)) * S
         - e(0.25 * G / J) * np.einsum("...gd,...ab->...abgd", ai, 2 * kin.A_inv - I1[..., None, None] * ai)
         - e(0.5 * G / J) * np.einsum("...ab,...gd->...abgd", ai, kin.A_inv)
         + e(0.25 * G * I1 / J) * S)
    # Korteweg part
    g, s = _phi_grad_terms(kin, dphi)
    lam = params.kappa
    gg = np.einsum("...a,...b->...ab", g, g)
    tch = s[..., None, None] * ai - 2 * gg
    C = C + e(0.25 * lam * J) * np.einsum("...ab,...gd->...abgd", tch, ai)
    C = C + e(0.5 * lam * J) * (
        -np.einsum("...gd,...ab->...abgd", gg, ai)
        - e(0.5 * s) * S
        + np.einsum("...ag,...d,...b->...abgd", ai, g, g)
        + np.einsum("...ad,...g,...b->...abgd", ai, g, g)
        + np.einsum("...a,...bg,...d->...abgd", g, ai, g)
        + np.einsum("...a,...bd,...g->...abgd", g, ai, g))
    # viscous part at fixed adot
    V = ai @ adot @ ai
    C = C + e(0.5 * eta * J) * np.einsum("...ab,...gd->...abgd", V, ai)
    C = C - e(0.5 * J * eta) * (np.einsum("...ag,...db->...abgd", ai, V)
                                + np.einsum("...ad,...gb->...abgd", ai, V)
                                + np.einsum("...ag,...bd->...abgd", V, ai)
                                + np.einsum("...ad,...bg->...abgd", V, ai))
    Dv = e(0.5 * J * eta) * (np.einsum("...ag,...db->...abgd", ai, ai)
                             + np.einsum("...ad,...gb->...abgd", ai, ai))
    return C, Dv


# ---------------------------------------------------------------------------
# Reporting measures
# ---------------------------------------------------------------------------

def surface_tension(N, a):
    """``gamma = N^{ab} a_{ab} / 2``."""
    return 0.5 * np.einsum("...ab,...ab->...", N, a)


def deviatoric_norm(N, a, a_inv):
    """``s = sqrt(N_dev^{ab} N^dev_{ab})`` with ``N_dev = N - gamma a^{..}``."""
    gam = surface_tension(N, a)
    Nd = N - gam[..., None, None] * a_inv
    low = a @ Nd @ a
    return np.sqrt(np.maximum(np.einsum("...ab,...ab->...", Nd, low), 0.0))


def korteweg_measures(kin: Kinematics, dphi, params: MaterialParams):
    """Analytically simplified ``(gamma_CH, s_CH)``: ``0`` and ``kappa |grad phi|^2 / sqrt 2``."""
    _, s = _phi_grad_terms(kin, dphi)
    return np.zeros_like(s), params.kappa * s / np.sqrt(2.0)
