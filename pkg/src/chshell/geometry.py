"""Differential geometry of the discretized surface at evaluation points.

All functions operate on arrays with arbitrary leading shape ``(...)`` so the
same code serves a single point (``BasisEval``) and whole meshes
(``Tabulation``, leading shape ``(E, Q)``).  Index conventions:

* ``a[..., alpha, k]``: covariant tangent ``a_alpha``;
* second derivatives are stored as full symmetric ``(..., 2, 2, ...)``;
* ``christoffel[..., g, a, b]`` is the symbol with upper index ``g``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spline import BasisEval, Tabulation

_SYM = np.array([[0, 1], [1, 2]])
DEGENERACY_TOL = 1e-14


class SingularGeometryError(ArithmeticError):
    """Degenerate or inverted surface element."""

    def __init__(self, message: str, element: int | None = None):
        super().__init__(f"element {element}: {message}" if element is not None else message)
        self.element = element


@dataclass(frozen=True)
class SurfacePointGeometry:
    a: np.ndarray            # (..., 2, 3)
    a_deriv: np.ndarray      # (..., 2, 2, 3)  a_{alpha,beta}
    metric: np.ndarray       # (..., 2, 2)
    metric_inv: np.ndarray   # (..., 2, 2)
    a_contra: np.ndarray     # (..., 2, 3)
    normal: np.ndarray       # (..., 3)
    curvature: np.ndarray    # (..., 2, 2)  b_{alpha beta}
    christoffel: np.ndarray  # (..., 2, 2, 2)
    area: np.ndarray         # (...)  |a_1 x a_2|, area per unit parametric area
    mean_curvature: np.ndarray
    gauss_curvature: np.ndarray
    J: np.ndarray            # area stretch w.r.t. the reference
    I1: np.ndarray           # A^{ab} a_{ab}

    @property
    def det(self) -> np.ndarray:
        return self.area ** 2


@dataclass(frozen=True)
class BasisSurfaceOperators:
    dN: np.ndarray     # (..., 2, n) parametric first derivatives
    cov2: np.ndarray   # (..., 2, 2, n) N_{;alpha beta}
    lap: np.ndarray    # (..., n) surface Laplacian of each basis function
    grad: np.ndarray   # (..., 3, n) surface gradient a^alpha N_{,alpha}


def _unpack(basis):
    if isinstance(basis, BasisEval):
        return basis.indices, basis.d1, basis.d2
    if isinstance(basis, Tabulation):
        return basis.indices, basis.dN, basis.ddN
    raise TypeError(f"unsupported basis container {type(basis).__name__}")


def gather(basis, nodal: np.ndarray) -> np.ndarray:
    """Element-local coefficient arrays: ``(n, k)`` or ``(E, 1, n, k)``."""
    idx, _, _ = _unpack(basis)
    vals = np.asarray(nodal)[idx]
    return vals if isinstance(basis, BasisEval) else vals[:, None]


def full_second(dd: np.ndarray) -> np.ndarray:
    """Expand ``(..., 3, m)`` derivative storage (11, 12, 22) to ``(..., 2, 2, m)``."""
    return dd[..., _SYM, :]


def geometry_from_derivatives(d1: np.ndarray, d2: np.ndarray, xe: np.ndarray,
                              reference: SurfacePointGeometry | None = None,
                              element_ids: np.ndarray | None = None) -> SurfacePointGeometry:
    """Geometry from parametric basis derivatives and element control points.

    ``d1`` has shape ``(..., 2, n)``, ``d2`` ``(..., 3, n)`` and ``xe``
    ``(..., n, 3)`` (broadcastable).  ``reference`` supplies ``A^{ab}`` and
    the reference metric for ``J`` and ``I1``; without it both refer to the
    configuration itself.
    """
    a = d1 @ xe
    add = (d2 @ xe)[..., _SYM, :]
    metric = a @ a.swapaxes(-1, -2)
    det = metric[..., 0, 0] * metric[..., 1, 1] - metric[..., 0, 1] ** 2
    _check_degenerate(det, metric, element_ids)
    inv = np.empty_like(metric)
    inv[..., 0, 0] = metric[..., 1, 1] / det
    inv[..., 1, 1] = metric[..., 0, 0] / det
    inv[..., 0, 1] = inv[..., 1, 0] = -metric[..., 0, 1] / det
    cross = np.cross(a[..., 0, :], a[..., 1, :])
    area = np.sqrt(det)
    n = cross / area[..., None]
    contra = inv @ a
    b = np.einsum("...abk,...k->...ab", add, n)
    gam = np.einsum("...abk,...gk->...gab", add, contra)
    H = 0.5 * np.einsum("...ab,...ab->...", inv, b)
    detb = b[..., 0, 0] * b[..., 1, 1] - b[..., 0, 1] ** 2
    if reference is None:
        J = np.ones_like(area)
        I1 = np.full_like(area, 2.0)
    else:
        J = area / reference.area
        I1 = np.einsum("...ab,...ab->...", reference.metric_inv, metric)
    return SurfacePointGeometry(a, add, metric, inv, contra, n, b, gam, area,
                                H, detb / det, J, I1)


def _check_degenerate(det, metric, element_ids):
    # scale-free test: det / (a_11 a_22) is the squared sine of the tangent angle
    scale = metric[..., 0, 0] * metric[..., 1, 1]
    bad = ~(det > DEGENERACY_TOL * scale) | ~np.isfinite(det) | ~(scale > 0)
    if np.any(bad):
        pos = np.unravel_index(int(np.flatnonzero(bad.reshape(-1))[0]), bad.shape)
        eid = None
        if element_ids is not None:
            eid = int(element_ids[pos[0]]) if np.ndim(element_ids) else int(element_ids)
        raise SingularGeometryError(f"degenerate metric (det = {float(det[pos]):.3e})", eid)


def point_geometry(basis, positions: np.ndarray,
                   reference: SurfacePointGeometry | None = None) -> SurfacePointGeometry:
    """Surface geometry for a ``BasisEval`` or ``Tabulation``.

    Parameters
    ----------
    basis : BasisEval or Tabulation
        Evaluated basis (single point or all elements at shared points).
    positions : numpy.ndarray
        Global control points, shape ``(n_basis, 3)``.
    reference : SurfacePointGeometry, optional
        Reference geometry at the same points (gives ``J`` and ``I1``).

    Raises
    ------
    SingularGeometryError
        If the metric is degenerate somewhere; carries the element index.
    """
    _, d1, d2 = _unpack(basis)
    xe = gather(basis, positions)
    ids = None
    if isinstance(basis, Tabulation):
        ids = np.arange(basis.indices.shape[0])
    return geometry_from_derivatives(d1, d2, xe, reference, ids)


def covariant_ops(geom: SurfacePointGeometry, basis) -> BasisSurfaceOperators:
    """Covariant second derivatives, Laplacian and gradient rows of the basis."""
    _, d1, d2 = _unpack(basis)
    dd = full_second(d2)
    cov2 = dd - (geom.christoffel.reshape(geom.christoffel.shape[:-3] + (2, 4)).swapaxes(-1, -2)
                 @ d1).reshape(d1.shape[:-2] + (2, 2, d1.shape[-1]))
    lap = np.einsum("...ab,...abn->...n", geom.metric_inv, cov2)
    grad = geom.a_contra.swapaxes(-1, -2) @ d1
    return BasisSurfaceOperators(d1, cov2, lap, grad)


def metric_rate(geom: SurfacePointGeometry, basis, velocities: np.ndarray):
    """Return ``(adot_cov, adot_contra)`` for global nodal velocities."""
    _, d1, _ = _unpack(basis)
    ve = gather(basis, velocities)
    vd = d1 @ ve
    ad = geom.a @ vd.swapaxes(-1, -2)
    ad = ad + ad.swapaxes(-1, -2)
    up = -(geom.metric_inv @ ad @ geom.metric_inv)
    return ad, up


def surface_points(basis, positions: np.ndarray) -> np.ndarray:
    """Surface positions at the evaluation points of ``basis``."""
    if isinstance(basis, BasisEval):
        return basis.values @ np.asarray(positions)[basis.indices]
    xe = np.asarray(positions)[basis.indices]
    return np.einsum("eqn,enk->eqk", basis.N, xe)
