"""Element residuals, mass matrices, analytic tangents and sparse assembly.

Unknowns per control point ``I``: position ``x_I`` (3 components) and phase
coefficient ``phi_I``.  Global ordering before elimination: ``3 I + i`` for
mechanics, ``3 n + I`` for the phase.  The reduced system keeps free
mechanical dofs first and all phase dofs after them.

Residual conventions (quadrature over the reference surface)::

    f     = M xdd + f_int(x, xd, phi) - f_ext(x)
    fbar  = Mbar phid + fbar_int(x, phi)

Element arrays are vectorized over ``(E, Q)``; ``n`` is the (padded) number
of local basis functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import constitutive as cm
from .geometry import SurfacePointGeometry, covariant_ops, geometry_from_derivatives
from .spline import SplineSpace, Tabulation, gauss_rule, tabulate


# ---------------------------------------------------------------------------
# Dof bookkeeping
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DofMap:
    """Mechanical and phase dofs with Dirichlet elimination.

    ``fixed`` lists global mechanical dof ids ``3 I + i``.  With
    ``mechanics=False`` all mechanical dofs are fixed (rigid surface).
    """

    n_nodes: int
    fixed: np.ndarray
    mechanics: bool = True

    def __post_init__(self):
        fixed = np.unique(np.asarray(self.fixed, dtype=np.int64))
        if fixed.size and (fixed[0] < 0 or fixed[-1] >= 3 * self.n_nodes):
            raise ValueError("fixed dof id out of range")
        object.__setattr__(self, "fixed", fixed)
        red = np.full(4 * self.n_nodes, -1, dtype=np.int64)
        if self.mechanics:
            free = np.setdiff1d(np.arange(3 * self.n_nodes), fixed)
        else:
            free = np.zeros(0, dtype=np.int64)
        red[free] = np.arange(free.size)
        red[3 * self.n_nodes:] = free.size + np.arange(self.n_nodes)
        object.__setattr__(self, "free_mech", free)
        object.__setattr__(self, "reduced", red)

    @property
    def n_free_mech(self) -> int:
        return int(self.free_mech.size)

    @property
    def n_free(self) -> int:
        return self.n_free_mech + self.n_nodes

    def restrict(self, f_mech: np.ndarray | None, f_phase: np.ndarray) -> np.ndarray:
        parts = [np.asarray(f_phase).reshape(-1)]
        if self.mechanics:
            parts.insert(0, np.asarray(f_mech).reshape(-1)[self.free_mech])
        return np.concatenate(parts)

    def expand(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Split a reduced vector into ``(dx (n, 3), dphi (n,))``."""
        dx = np.zeros(3 * self.n_nodes)
        dx[self.free_mech] = u[:self.n_free_mech]
        return dx.reshape(-1, 3), u[self.n_free_mech:]


class SparseAssembler:
    """Scatter element matrices into a fixed CSR pattern of the reduced system."""

    def __init__(self, dofmap: DofMap, elem_dofs: np.ndarray):
        self.dofmap = dofmap
        red = dofmap.reduced[elem_dofs]          # (E, m)
        m = red.shape[1]
        r = np.repeat(red, m, axis=1).reshape(-1)
        c = np.tile(red, (1, m)).reshape(-1)
        keep = (r >= 0) & (c >= 0)
        nf = dofmap.n_free
        key = r[keep] * nf + c[keep]
        uniq, inv = np.unique(key, return_inverse=True)
        self._keep = np.flatnonzero(keep)
        self._inv = inv
        self._nnz = uniq.size
        rows = uniq // nf
        self._indices = (uniq % nf).astype(np.int32)
        self._indptr = np.searchsorted(rows, np.arange(nf + 1)).astype(np.int32)
        self.shape = (nf, nf)
        self.elem_dofs = elem_dofs

    def matrix(self, elem_mats: np.ndarray) -> sp.csr_matrix:
        vals = elem_mats.reshape(-1)[self._keep]
        data = np.bincount(self._inv, weights=vals, minlength=self._nnz)
        return sp.csr_matrix((data, self._indices.copy(), self._indptr.copy()), shape=self.shape)

    @property
    def nnz(self) -> int:
        return self._nnz


def scatter_add(indices: np.ndarray, values: np.ndarray, size: int) -> np.ndarray:
    """Sum element vectors ``values (E, n, ...)`` into a global array."""
    tail = values.shape[2:]
    flat = values.reshape(values.shape[0] * values.shape[1], -1)
    out = np.empty((size, flat.shape[1]))
    idx = indices.reshape(-1)
    for k in range(flat.shape[1]):
        out[:, k] = np.bincount(idx, weights=flat[:, k], minlength=size)
    return out.reshape((size,) + tail)


# ---------------------------------------------------------------------------
# Quadrature-point state
# ---------------------------------------------------------------------------

@dataclass
class QuadState:
    geom: SurfacePointGeometry
    kin: cm.Kinematics
    phi: np.ndarray        # (E, Q)
    dphi: np.ndarray       # (E, Q, 2) covariant gradient components
    cov2: np.ndarray       # (E, Q, 2, 2, n)
    lap: np.ndarray        # (E, Q, n)
    lap_phi: np.ndarray    # (E, Q)
    phi_cov2: np.ndarray   # (E, Q, 2, 2)
    adot: np.ndarray       # (E, Q, 2, 2)
    vd: np.ndarray         # (E, Q, 2, 3) velocity derivatives
    mod: cm.Moduli
    stress: cm.StressState | None
    chem: cm.ChemicalPotential


def _gather(arr, idx: np.ndarray, ndim: int) -> np.ndarray:
    """Element-local view of a global nodal array; element-local input passes through."""
    arr = np.asarray(arr, dtype=float)
    return arr if arr.ndim == ndim + 1 else arr[idx]


def _outer(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``(..., n)`` and ``(..., 3)`` to ``(..., n, 3)`` products (flattened node-major)."""
    out = A[..., :, None] * B[..., None, :]
    return out.reshape(out.shape[:-2] + (-1,))


def _cross_matrix(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


@dataclass
class Evaluation:
    """Global residual parts and (optionally) element tangent blocks."""

    f_int: np.ndarray          # (n, 3)
    f_ext: np.ndarray          # (n, 3)
    fbar_int: np.ndarray       # (n,)
    k_xx: np.ndarray | None = None    # (E, n, 3, n, 3) d(f_int - f_ext)/dx
    k_xv: np.ndarray | None = None    # (E, n, 3, n, 3) d f_int / d xdot
    k_xp: np.ndarray | None = None    # (E, n, 3, n)
    k_px: np.ndarray | None = None    # (E, n, n, 3)
    k_pp: np.ndarray | None = None    # (E, n, n)


class ShellModel:
    """Discrete coupled shell / Cahn-Hilliard model on a spline space.

    Parameters
    ----------
    space : SplineSpace
    X : numpy.ndarray
        Reference control points ``(n, 3)``.
    params : MaterialParams
    pressure : float
        Follower pressure acting along the current normal.
    dofmap : DofMap
    quad_points : int, optional
        Gauss points per direction; defaults to ``degree + 1``.
    element_X : numpy.ndarray, optional
        Element-local reference control points ``(E, n, 3)``.  Needed when a
        periodic parametrization has no single-valued global position vector
        (the flat periodic square); only valid for rigid-surface models.
    """

    def __init__(self, space: SplineSpace, X: np.ndarray, params: cm.MaterialParams,
                 dofmap: DofMap, pressure: float = 0.0, quad_points: int | None = None,
                 element_X: np.ndarray | None = None):
        self.space = space
        if element_X is not None and dofmap.mechanics:
            raise ValueError("element-local reference positions require a rigid surface")
        self.element_X = None if element_X is None else np.asarray(element_X, dtype=float)
        self.X = np.asarray(X, dtype=float)
        if self.X.shape != (space.n_basis, 3):
            raise ValueError(f"expected reference positions of shape ({space.n_basis}, 3), got {self.X.shape}")
        if dofmap.n_nodes != space.n_basis:
            raise ValueError("dof map does not match the spline space")
        self.params = params
        self.pressure = float(pressure)
        self.dofmap = dofmap
        xi, w = gauss_rule(quad_points or space.degree + 1)
        self.tab = tabulate(space, xi)
        self.wq = w
        self.ref = self.reference_geometry(self.tab)
        self.dA = self.ref.area * w                     # (E, Q)
        self.n_nodes = space.n_basis
        idx = self.tab.indices
        self.mask = (np.abs(self.tab.N).max(axis=1) > 0).astype(float)  # padded slots are 0
        n_loc = idx.shape[1]
        mech = (3 * idx[:, :, None] + np.arange(3)).reshape(idx.shape[0], 3 * n_loc)
        self.elem_dofs = np.concatenate([mech, 3 * self.n_nodes + idx], axis=1)
        self.n_loc = n_loc
        self.assembler = SparseAssembler(dofmap, self.elem_dofs if dofmap.mechanics
                                         else 3 * self.n_nodes + idx)
        # lumped-free consistent mass, constant in time
        self.m_elem = self.params.rho * np.einsum("eqI,eqJ,eq->eIJ", self.tab.N, self.tab.N, self.dA)
        rows = np.repeat(idx, n_loc, axis=1).reshape(-1)
        cols = np.tile(idx, (1, n_loc)).reshape(-1)
        self.mass_scalar = sp.csr_matrix((self.m_elem.reshape(-1), (rows, cols)),
                                         shape=(self.n_nodes, self.n_nodes))
        self._frozen = None
        self._frozen_ops = None

    # -- geometry -------------------------------------------------------------

    def element_positions(self, x: np.ndarray | None = None) -> np.ndarray:
        """Element-local control points ``(E, n, 3)``."""
        if self.element_X is not None:
            return self.element_X
        return np.asarray(self.X if x is None else x)[self.tab.indices]

    def reference_geometry(self, tab: Tabulation) -> SurfacePointGeometry:
        return geometry_from_derivatives(tab.dN, tab.ddN, self.element_positions()[:, None],
                                         element_ids=np.arange(tab.indices.shape[0]))

    @property
    def reference_area(self) -> float:
        return float(self.dA.sum())

    def mass_matrix(self) -> sp.csr_matrix:
        """Mechanical mass matrix ``(3n, 3n)``."""
        return sp.kron(self.mass_scalar, sp.identity(3), format="csr")

    def species_mass(self, phi: np.ndarray) -> float:
        return float(np.sum(self.mass_scalar @ phi))

    # -- state at points ------------------------------------------------------

    def quad_state(self, x, v, phi, tab: Tabulation | None = None,
                   ref: SurfacePointGeometry | None = None, stress: bool = True) -> QuadState:
        tab = tab or self.tab
        ref = ref if ref is not None else self.ref
        idx = tab.indices
        xe = _gather(x, idx, 2)
        if self._frozen is not None and tab is self.tab:
            geom = self._frozen
        elif self._frozen is not None:
            geom = geometry_from_derivatives(tab.dN, tab.ddN, self.element_positions()[:, None],
                                             ref, element_ids=np.arange(idx.shape[0]))
        else:
            geom = geometry_from_derivatives(tab.dN, tab.ddN, xe[:, None], ref,
                                             element_ids=np.arange(idx.shape[0]))
        kin = cm.Kinematics(ref.metric_inv, ref.curvature, geom.metric, geom.curvature,
                            geom.metric_inv, geom.J, geom.I1)
        pe = _gather(phi, idx, 1)                               # (E, n)
        phq = np.einsum("eqn,en->eq", tab.N, pe)
        cm.check_phase(phq)
        dphi = np.einsum("eqan,en->eqa", tab.dN, pe)
        if self._frozen is not None and tab is self.tab:
            if self._frozen_ops is None:
                self._frozen_ops = covariant_ops(geom, tab)
            ops = self._frozen_ops
        else:
            ops = covariant_ops(geom, tab)
        lap_phi = np.einsum("eqn,en->eq", ops.lap, pe)
        phi_cov2 = np.einsum("eqabn,en->eqab", ops.cov2, pe)
        if v is None or not np.any(v):
            vd = np.zeros_like(geom.a)
            adot = np.zeros_like(geom.metric)
        else:
            vd = tab.dN @ _gather(v, idx, 2)[:, None]
            adot = geom.a @ vd.swapaxes(-1, -2)
            adot = adot + adot.swapaxes(-1, -2)
        mod = cm.moduli(phq, self.params)
        st = cm.membrane_stress(kin, phq, dphi, adot, self.params, mod) if stress else None
        chem = cm.chemical_potential(kin, phq, lap_phi, self.params, mod)
        return QuadState(geom, kin, phq, dphi, ops.cov2, ops.lap, lap_phi, phi_cov2,
                         adot, vd, mod, st, chem)

    def freeze_geometry(self, frozen: bool = True) -> None:
        """Reuse the reference geometry as current geometry (rigid-surface runs)."""
        self._frozen = self.ref if frozen else None
        self._frozen_ops = None

    # -- residuals and tangents -----------------------------------------------

    def _residual_parts(self, qs: QuadState, mechanics: bool = True):
        """Element residual vectors ``(P, f_int_e, f_ext_e, fbar_e)`` at a quadrature state."""
        g, tab, dA = qs.geom, self.tab, self.dA
        N, dN = tab.N, tab.dN
        M, dM, _ = cm.mobility(qs.phi, self.params.D)
        ch = qs.chem
        mu_b = ch.mu_i + ch.mu_el
        Qc = M * ch.dmu_phi - dM * mu_b
        grad_phi_up = np.einsum("eqab,eqb->eqa", g.metric_inv, qs.dphi)     # g^a
        P = np.einsum("eqan,eqa->eqn", dN, grad_phi_up)                      # N_I,a a^ab phi_b
        fbar_e = np.einsum("eq,eqn->en", dA, Qc[..., None] * P - qs.lap * (M * mu_b)[..., None])
        if not mechanics:
            return P, None, None, fbar_e
        tau = qs.stress.tau
        M0 = qs.stress.moment0
        E, Q, n = N.shape
        ta = (tau * dA[..., None, None]) @ g.a                              # (E, Q, 2, 3)
        mc = np.einsum("eqab,eqabn->eqn", M0, qs.cov2) * dA[..., None]
        f_e = (dN.transpose(0, 3, 1, 2).reshape(E, n, 2 * Q) @ ta.reshape(E, 2 * Q, 3)
               + mc.transpose(0, 2, 1) @ g.normal)
        cross = np.cross(g.a[..., 0, :], g.a[..., 1, :])
        fx_e = self.pressure * np.einsum("eqn,eqk,q->enk", N, cross, self.wq)
        return P, f_e, fx_e, fbar_e

    def element_residuals(self, x, v, phi, mechanics: bool = True):
        """Element vectors ``(f_int - f_ext (E, n, 3), fbar_int (E, n))``.

        Inputs may be global ``(n_nodes, ...)`` or element-local ``(E, n, ...)``
        arrays; the latter allow independent perturbation per element.
        """
        qs = self.quad_state(x, v, phi, stress=mechanics)
        _, f_e, fx_e, fbar_e = self._residual_parts(qs, mechanics)
        return (f_e - fx_e if mechanics else None), fbar_e

    def evaluate(self, x, v, phi, tangent: bool = True, mechanics: bool = True) -> Evaluation:
        """Residual parts and element tangent blocks at a state.

        With ``mechanics=False`` only the phase residual and ``k_pp`` are
        computed (the mechanical parts are returned as zeros).
        """
        tab = self.tab
        qs = self.quad_state(x, v, phi, stress=mechanics)
        g = qs.geom
        idx = tab.indices
        dA = self.dA
        N, dN = tab.N, tab.dN
        E, Q, n = N.shape
        p = self.params
        kappa = p.kappa
        M, dM, d2M = cm.mobility(qs.phi, p.D)
        ch = qs.chem
        mu_b = ch.mu_i + ch.mu_el
        Qc = M * ch.dmu_phi - dM * mu_b
        R = M * mu_b
        P, f_e, fx_e, fbar_e = self._residual_parts(qs, mechanics)
        fbar = np.bincount(idx.reshape(-1), weights=fbar_e.reshape(-1), minlength=self.n_nodes)
        if mechanics:
            f_int = scatter_add(idx, f_e, self.n_nodes)
            f_ext = scatter_add(idx, fx_e, self.n_nodes)
        else:
            f_int = np.zeros((self.n_nodes, 3))
            f_ext = np.zeros((self.n_nodes, 3))
        ev = Evaluation(f_int, f_ext, fbar)
        if not tangent:
            return ev

        # k_pp: d fbar / d phi
        lapN = qs.lap
        aup = g.metric_inv @ dN                 # a^ab N_K,b
        dQ = dM * (ch.dmu_phi - ch.dmu_el) + M * ch.d2mu_phi - d2M * mu_b
        Jk = qs.kin.J * kappa
        # all five terms as one batched product over stacked (point, factor) rows
        left = np.concatenate([
            ((dA * Qc)[..., None, None] * dN).reshape(E, 2 * Q, n),
            (dA * Jk * M)[..., None] * lapN,
            P * (dA * dQ)[..., None],
            P * (dA * dM * Jk)[..., None],
            -lapN * (dA * (dM * mu_b + M * ch.dmu_el))[..., None]], axis=1)
        right = np.concatenate([aup.reshape(E, 2 * Q, n), lapN, N, lapN, N], axis=1)
        k_pp = left.transpose(0, 2, 1) @ right
        ev.k_pp = k_pp
        if not mechanics:
            return ev

        a, ai, ac, nrm = g.a, g.metric_inv, g.a_contra, g.normal
        tau, M0 = qs.stress.tau, qs.stress.moment0
        C, Dv = cm.material_tangent(qs.kin, qs.phi, qs.dphi, qs.adot, p, qs.mod)
        C4, D4 = C.reshape(E, Q, 4, 4), Dv.reshape(E, Q, 4, 4)
        m3 = 3 * n
        # every k_xx term is written as sum_r L[r, Ii] R[r, Jj] over stacked rows r
        Na = _outer(dN[..., :, None, :], a[..., None, :, :]).reshape(E, Q, 4, m3)  # N_I,a a_b
        Nv = _outer(dN[..., :, None, :], qs.vd[..., None, :, :]).reshape(E, Q, 4, m3)
        w = dA[..., None, None]
        T = 2 * (C4 @ Na + D4 @ Nv)                  # membrane material and viscous x-terms
        c = qs.mod.c
        Ainv = self.ref.metric_inv
        AcA = np.einsum("eqag,eqbd,eqgdJ->eqabJ", Ainv, Ainv, qs.cov2, optimize=True)
        covn = _outer(qs.cov2, nrm[..., None, None, :]).reshape(E, Q, 4, m3)
        AcAn = _outer(AcA, nrm[..., None, None, :]).reshape(E, Q, 4, m3)
        # bending geometric terms
        mc = np.einsum("eqab,eqabI->eqI", M0, qs.cov2)                     # M0:N_I;ab
        aN = np.einsum("eqak,eqaJ->eqkJ", ac, dN)                           # a^m N_J,m
        eye = np.eye(3)
        mcI = _outer(mc[..., None, :], eye).reshape(E, Q, 3, m3)            # mc_I delta_ik
        aNn = _outer(aN, nrm[..., None, :]).reshape(E, Q, 3, m3)           # aN_Jk n_j
        Mb = np.einsum("eqab,eqab->eq", M0, g.curvature)
        dNn = _outer(dN, nrm[..., None, :]).reshape(E, Q, 2, m3)
        aupn = _outer(aup, nrm[..., None, :]).reshape(E, Q, 2, m3)
        lefts = [w * Na, (dA * c)[..., None, None] * covn, -w * mcI, -w * aNn,
                 -(dA * Mb)[..., None, None] * dNn]
        rights = [T, AcAn, aNn, mcI, aupn]
        if self.pressure != 0.0:
            # follower load: d(a1 x a2)/dx_J = N_J,2 [a1]x - N_J,1 [a2]x
            A1 = _cross_matrix(a[..., 0, :])
            A2 = _cross_matrix(a[..., 1, :])
            dcross = (_outer(dN[..., 1, None, :], A1)
                      - _outer(dN[..., 0, None, :], A2)).reshape(E, Q, 3, m3)
            NI = _outer(N[..., None, :], eye).reshape(E, Q, 3, m3)
            lefts.append(-self.pressure * self.wq[None, :, None, None] * NI)
            rights.append(dcross)
        L = np.concatenate(lefts, axis=2).reshape(E, -1, m3)
        Rm = np.concatenate(rights, axis=2).reshape(E, -1, m3)
        k_xx = L.transpose(0, 2, 1) @ Rm
        geo = (tau @ dN * w).reshape(E, 2 * Q, n).transpose(0, 2, 1) @ dN.reshape(E, 2 * Q, n)
        k_xx = k_xx.reshape(E, n, 3, n, 3) + geo[:, :, None, :, None] * eye[:, None, :]
        k_xv = ((w * Na).reshape(E, 4 * Q, m3).transpose(0, 2, 1)
                @ (2 * D4 @ Na).reshape(E, 4 * Q, m3)).reshape(E, n, 3, n, 3)
        ev.k_xx = k_xx
        ev.k_xv = k_xv

        # k_xp: d f_int / d phi
        sd = cm.stress_phi_derivatives(qs.kin, qs.phi, qs.dphi, qs.adot, p, qs.mod)
        X1 = np.einsum("eqab,eqK->eqabK", sd.dtau_dphi, N) \
            + np.einsum("eqabg,eqgK->eqabK", sd.dtau_dgrad, dN)
        L = np.concatenate([w * Na, w * covn], axis=2).reshape(E, 8 * Q, m3)
        Rp = np.concatenate([X1.reshape(E, Q, 4, n),
                             sd.dM0_dphi.reshape(E, Q, 4, 1) * N[:, :, None, :]], axis=2)
        ev.k_xp = (L.transpose(0, 2, 1) @ Rp.reshape(E, 8 * Q, n)).reshape(E, n, 3, n)

        # k_px: d fbar / d x, again as stacked row products.  With
        # d a^{ab}/dx_Jj = -(a^b_j a^{ag} + a^a_j a^{bg}) N_J,g one finds
        #   dP_I  = -N_I,a (a^{ab}N_J,b grad(phi)_j + a^a_j P_J)
        #   dLN_I = -2 N_I;ab a^{ag}N_J,g a^b_j - N_I,g (a^g_j LN_J + 2 H a^{gd}N_J,d n_j)
        H = g.mean_curvature
        gphi = np.einsum("eqa,eqaj->eqj", qs.dphi, ac)                      # surface gradient
        R1 = _outer(aup, gphi[..., None, :]) + _outer(P[..., None, :], ac)   # (E,Q,2,3n)
        R2 = _outer(lapN[..., None, :], ac) + 2 * H[..., None, None] * aupn
        cross_ab = _outer(aup[..., :, None, :], ac[..., None, :, :]).reshape(E, Q, 4, m3)
        # d(Delta phi)/dx_Jj and the chemical potential derivatives
        dlp = -(2 * np.einsum("eqab,eqabJ->eqJ", qs.phi_cov2, cross_ab.reshape(E, Q, 2, 2, m3))
                + np.einsum("eqg,eqgJ->eqJ", qs.dphi, R2))
        dJ = qs.kin.J[..., None] * aN.swapaxes(-1, -2).reshape(E, Q, m3)
        dmu_i = -kappa * (dJ * qs.lap_phi[..., None] + qs.kin.J[..., None] * dlp)
        tel = cm.elastic_tau(qs.kin, qs.mod, derivative=True)
        dmu_el = (np.einsum("eqa,eqaJ->eqJ", tel.reshape(E, Q, 4), Na)
                  + np.einsum("eqa,eqaJ->eqJ", sd.dM0_dphi.reshape(E, Q, 4), covn))
        coef = dM[..., None] * P + M[..., None] * lapN                       # (E,Q,I)
        left = np.concatenate([dN, qs.cov2.reshape(E, Q, 4, n), coef[:, :, None]], axis=2)
        right = np.concatenate([
            (dA * R)[..., None, None] * R2 - (dA * Qc)[..., None, None] * R1,
            (2 * dA * R)[..., None, None] * cross_ab,
            -(dA[..., None] * (dmu_i + dmu_el))[:, :, None]], axis=2)
        ev.k_px = (left.reshape(E, 7 * Q, n).transpose(0, 2, 1)
                   @ right.reshape(E, 7 * Q, m3)).reshape(E, n, n, 3)
        return ev

    # -- combined system ------------------------------------------------------

    def element_matrices(self, ev: Evaluation, s_x: float, s_v: float, s_a: float,
                         s_p: float) -> np.ndarray:
        """Combine tangent blocks into ``(E, m, m)`` matrices for the reduced system.

        ``s_x`` scales every stiffness-type block, ``s_v`` the velocity block,
        ``s_a`` the mechanical and ``s_p`` the phase mass matrix.
        """
        E, n = ev.k_pp.shape[:2]
        pp = s_x * ev.k_pp + s_p * self.m_elem
        if not self.dofmap.mechanics:
            return pp
        m = 3 * n
        out = np.empty((E, 4 * n, 4 * n))
        xx = s_x * ev.k_xx + s_v * ev.k_xv
        xx += s_a * self.m_elem[:, :, None, :, None] * np.eye(3)[None, None, :, None, :]
        out[:, :m, :m] = xx.reshape(E, m, m)
        out[:, :m, m:] = s_x * ev.k_xp.reshape(E, m, n)
        out[:, m:, :m] = s_x * ev.k_px.reshape(E, n, m)
        out[:, m:, m:] = pp
        return out

    def global_blocks(self, ev: Evaluation) -> dict[str, sp.csr_matrix]:
        """Unreduced global tangent blocks (for verification)."""
        idx = self.tab.indices
        E, n = idx.shape
        nn = self.n_nodes
        mech = (3 * idx[:, :, None] + np.arange(3)).reshape(E, 3 * n)

        def build(vals, rdofs, cdofs, shape):
            r = np.repeat(rdofs, cdofs.shape[1], axis=1).reshape(-1)
            c = np.tile(cdofs, (1, rdofs.shape[1])).reshape(-1)
            return sp.csr_matrix((vals.reshape(-1), (r, c)), shape=shape)

        out = {"pp": build(ev.k_pp, idx, idx, (nn, nn))}
        if ev.k_xx is not None:
            out["xx"] = build(ev.k_xx.reshape(E, 3 * n, 3 * n), mech, mech, (3 * nn, 3 * nn))
            out["xv"] = build(ev.k_xv.reshape(E, 3 * n, 3 * n), mech, mech, (3 * nn, 3 * nn))
            out["xp"] = build(ev.k_xp.reshape(E, 3 * n, n), mech, idx, (3 * nn, nn))
            out["px"] = build(ev.k_px.reshape(E, n, 3 * n), idx, mech, (nn, 3 * nn))
        return out

    # -- diagnostics ------------------------------------------------------------

    def energies(self, x, phi, v=None) -> dict[str, float]:
        qs = self.quad_state(x, v, phi, stress=False)
        dens = cm.energy_density(qs.kin, qs.phi, qs.dphi, self.params, qs.mod)
        integ = lambda f: float(np.sum(f * self.dA))  # noqa: E731
        el, chv = integ(dens.el), integ(dens.ch)
        return {"psi_el": el, "psi_ch": chv, "psi_total": el + chv,
                "phi_min": float(qs.phi.min()), "phi_max": float(qs.phi.max())}


def fd_tangent_oracle(model: ShellModel, x, v, phi, columns, h: float = 1e-6,
                      wrt: str = "x") -> np.ndarray:
    """Central-difference columns of the assembled residual ``[f_int - f_ext; fbar_int]``.

    ``wrt`` selects the perturbed vector: ``"x"`` (dof ``3 I + i``),
    ``"v"`` (velocities, same numbering) or ``"phi"`` (dof ``I``).
    """
    x = np.array(x, dtype=float)
    v = np.zeros_like(x) if v is None else np.array(v, dtype=float)
    phi = np.array(phi, dtype=float)
    cols = []
    for k in columns:
        res = []
        for sgn in (1.0, -1.0):
            xs, vs, ps = x.copy(), v.copy(), phi.copy()
            if wrt == "x":
                xs.reshape(-1)[k] += sgn * h
            elif wrt == "v":
                vs.reshape(-1)[k] += sgn * h
            elif wrt == "phi":
                ps[k] += sgn * h
            else:
                raise ValueError(f"unknown perturbation target {wrt!r}")
            ev = model.evaluate(xs, vs, ps, tangent=False)
            res.append(np.concatenate([(ev.f_int - ev.f_ext).reshape(-1), ev.fbar_int]))
        cols.append((res[0] - res[1]) / (2 * h))
    return np.array(cols).T


def fd_element_tangents(model: ShellModel, x, v, phi, h: float = 1e-6) -> dict[str, np.ndarray]:
    """Central-difference element tangent blocks in the layout of :class:`Evaluation`.

    Each local dof is perturbed in every element at once, so the cost is
    ``2 (7 n)`` residual evaluations independent of the mesh size.
    """
    idx = model.tab.indices
    xe = np.asarray(x, dtype=float)[idx]
    ve = (np.zeros_like(xe) if v is None else np.asarray(v, dtype=float)[idx])
    pe = np.asarray(phi, dtype=float)[idx]
    E, n = idx.shape

    def diff(arr, pos, target):
        out = []
        for sgn in (1.0, -1.0):
            a = arr.copy()
            a[(slice(None),) + pos] += sgn * h
            args = {"x": xe, "v": ve, "phi": pe}
            args[target] = a
            out.append(model.element_residuals(args["x"], args["v"], args["phi"]))
        return ((out[0][0] - out[1][0]) / (2 * h), (out[0][1] - out[1][1]) / (2 * h))

    blocks = {"xx": np.empty((E, n, 3, n, 3)), "xv": np.empty((E, n, 3, n, 3)),
              "px": np.empty((E, n, n, 3)), "xp": np.empty((E, n, 3, n)),
              "pp": np.empty((E, n, n))}
    for J in range(n):
        for j in range(3):
            fx, fp = diff(xe, (J, j), "x")
            blocks["xx"][:, :, :, J, j] = fx
            blocks["px"][:, :, J, j] = fp
            blocks["xv"][:, :, :, J, j] = diff(ve, (J, j), "v")[0]
        fx, fp = diff(pe, (J,), "phi")
        blocks["xp"][:, :, :, J] = fx
        blocks["pp"][:, :, J] = fp
    return blocks
