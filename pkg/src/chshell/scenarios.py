"""Experiment setups: periodic square, deforming torus, external meshes.

Torus parametrization: the first parametric direction follows the major
angle ``varphi``, the second the minor angle ``theta``, so ``a_1 x a_2``
points outward.  ``n_u`` counts elements around the major circle and ``n_v``
around the tube (a "16 x 64" mesh has ``n_v = 16`` and ``n_u = 64``).

Two torus discretizations exist:

* :func:`torus_mesh` is the C1 periodic quadratic B-spline surface used
  for simulation.  Its circles are L2 projections, so the geometry error
  decays with refinement.
* :func:`exact_torus_mesh` is the rational C0 surface built from the
  nine-point circle, exact to round-off, used as a geometry reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb
from typing import IO

import numpy as np

from .assembly import DofMap, ShellModel
from .constitutive import MaterialParams
from .geometry import point_geometry
from .integrator import IntegratorConfig
from .spline import (KnotVector, SplineSpace, bernstein_eval, build_structured_patch, gauss_rule,
                     load_extraction_mesh, tabulate)


@dataclass(frozen=True, eq=False)
class Scenario:
    """Everything needed to run a simulation."""

    name: str
    space: SplineSpace
    X: np.ndarray
    params: MaterialParams
    phi0: np.ndarray
    fixed: np.ndarray
    mechanics: bool
    pressure: float
    integrator: IntegratorConfig
    t_end: float
    element_X: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.space.n_basis
        if self.phi0.shape != (n,):
            raise ValueError(f"initial phase field must have {n} entries")
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")

    def model(self, quad_points: int | None = None) -> ShellModel:
        dofmap = DofMap(self.space.n_basis, self.fixed, self.mechanics)
        return ShellModel(self.space, self.X, self.params, dofmap, self.pressure,
                          quad_points, self.element_X)


# ---------------------------------------------------------------------------
# Initial conditions
# ---------------------------------------------------------------------------

def check_phase_settings(phi_bar: float, amplitude: float) -> None:
    if not 0 < phi_bar < 1:
        raise ValueError(f"phi_bar must lie in (0, 1), got {phi_bar}")
    if not 0 <= amplitude < min(phi_bar, 1 - phi_bar):
        raise ValueError(f"amplitude {amplitude} must lie in [0, min(phi_bar, 1 - phi_bar))")


def initial_phase_field(n: int, phi_bar: float, amplitude: float = 0.05,
                        seed: int | np.random.Generator = 0) -> np.ndarray:
    """``phi_bar`` plus i.i.d. uniform perturbations in ``[-amplitude, amplitude]``."""
    check_phase_settings(phi_bar, amplitude)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return phi_bar + rng.uniform(-amplitude, amplitude, n)


def subdivide_periodic(coeffs: np.ndarray, degree: int, axis: int) -> np.ndarray:
    """Coefficients of the same uniform periodic spline after halving every element.

    Uses the subdivision mask ``binom(p+1, k) / 2^p``: coarse function ``k``
    equals ``sum_j mask_j`` times fine function ``2k + j``.
    """
    c = np.moveaxis(np.asarray(coeffs, dtype=float), axis, 0)
    n = c.shape[0]
    mask = np.array([comb(degree + 1, j) for j in range(degree + 2)]) / 2 ** degree
    out = np.zeros((2 * n,) + c.shape[1:])
    for k in range(n):
        for j, m in enumerate(mask):
            out[(2 * k + j) % (2 * n)] += m * c[k]
    return np.moveaxis(out, 0, axis)


def prolonged_phase_field(shape: tuple[int, int], base: tuple[int, int], degree: int,
                          phi_bar: float, amplitude: float, seed: int) -> np.ndarray:
    """Random field drawn on a coarse periodic grid and subdivided to ``shape``.

    ``shape`` and ``base`` are ``(n_v, n_u)`` element counts; each ratio must
    be the same power of two.  Meshes sharing ``base`` and ``seed`` thus start
    from the same continuous initial condition.
    """
    rv, ru = shape[0] // base[0], shape[1] // base[1]
    if rv != ru or rv * base[0] != shape[0] or ru * base[1] != shape[1] or rv & (rv - 1):
        raise ValueError(f"mesh {shape} is not a dyadic refinement of {base}")
    c = initial_phase_field(base[0] * base[1], phi_bar, amplitude, seed).reshape(base)
    while c.shape != tuple(shape):
        c = subdivide_periodic(subdivide_periodic(c, degree, 0), degree, 1)
    return c.reshape(-1)


# ---------------------------------------------------------------------------
# Geometry builders
# ---------------------------------------------------------------------------

def periodic_fit(n_elems: int, degree: int, func, points: int = 8) -> np.ndarray:
    """L2 projection of a 1-periodic function onto the uniform periodic spline space."""
    kv = KnotVector.uniform(degree, n_elems, periodic=True)
    x, w = np.polynomial.legendre.leggauss(points)
    x, w = 0.5 * (x + 1), 0.5 * w
    B = bernstein_eval(degree, x, 0)[0]          # (points, p+1)
    n = kv.n_basis
    M = np.zeros((n, n))
    rhs = np.zeros(n)
    for idx, C, (a, b) in kv.extraction():
        N = B @ C.T                               # (points, p+1)
        h = b - a
        M[np.ix_(idx, idx)] += h * np.einsum("q,qi,qj->ij", w, N, N)
        rhs[idx] += h * np.einsum("q,qi,q->i", w, N, func(a + h * x))
    return np.linalg.solve(M, rhs)


def torus_mesh(R: float, r: float, n_u: int, n_v: int, degree: int = 2):
    """C1 periodic B-spline torus; returns ``(space, X, meta)``.

    The parametrization is shifted so that the Greville point of basis
    function ``k`` sits at angle ``2 pi k / n``; control point ``(0, 0)``
    then lies on the outer equator at ``varphi = 0``.
    """
    if not R > r > 0:
        raise ValueError(f"torus radii must satisfy R > r > 0, got R={R}, r={r}")
    space = build_structured_patch(degree, n_u, n_v, True, True)
    shift_u = (degree + 1) / 2 / n_u
    shift_v = (degree + 1) / 2 / n_v
    cu = periodic_fit(n_u, degree, lambda s: np.cos(2 * np.pi * (s - shift_u)))
    su = periodic_fit(n_u, degree, lambda s: np.sin(2 * np.pi * (s - shift_u)))
    cv = periodic_fit(n_v, degree, lambda s: np.cos(2 * np.pi * (s - shift_v)))
    sv = periodic_fit(n_v, degree, lambda s: np.sin(2 * np.pi * (s - shift_v)))
    rad = R + r * cv[:, None]                   # (n_v, 1)
    X = np.stack([rad * cu[None, :], rad * su[None, :],
                  np.broadcast_to(r * sv[:, None], (n_v, n_u))], axis=-1)
    meta = {"shift": (shift_u, shift_v)}
    return space, X.reshape(-1, 3), meta


def exact_torus_mesh(R: float, r: float, degree: int = 2):
    """Rational C0 torus from nine-point circles (4 x 4 elements), exact geometry."""
    if degree != 2:
        raise ValueError("the exact circle construction is quadratic")
    if not R > r > 0:
        raise ValueError(f"torus radii must satisfy R > r > 0, got R={R}, r={r}")
    kv = KnotVector(2, (0.0, 0.0, 0.25, 0.25, 0.5, 0.5, 0.75, 0.75), True, 1.0)
    # basis k peaks at angle (k + 1) * 45 degrees; odd k are the corner points
    ang = (np.arange(8) + 1) * np.pi / 4
    s2 = np.sqrt(0.5)
    w1 = np.where(np.arange(8) % 2 == 1, 1.0, s2)
    rad = np.where(np.arange(8) % 2 == 1, 1.0, 1 / s2)
    cx, cy = rad * np.cos(ang), rad * np.sin(ang)    # unit circle control points
    W = w1[:, None] * w1[None, :]                     # (v, u)
    rr = R + r * cx[:, None]
    X = np.stack([rr * cx[None, :], rr * cy[None, :],
                  np.broadcast_to(r * cy[:, None], (8, 8))], axis=-1).reshape(-1, 3)
    space = build_structured_patch(2, 4, 4, True, True, weights=W, knots_u=kv, knots_v=kv)
    return space, X


def torus_point(R: float, r: float, varphi, theta) -> np.ndarray:
    varphi, theta = np.asarray(varphi), np.asarray(theta)
    rad = R + r * np.cos(theta)
    return np.stack([rad * np.cos(varphi), rad * np.sin(varphi), r * np.sin(theta)], axis=-1)


def distance_to_torus(R: float, r: float, pts: np.ndarray) -> np.ndarray:
    rho = np.hypot(pts[..., 0], pts[..., 1])
    return np.abs(np.hypot(rho - R, pts[..., 2]) - r)


def torus_fixed_dofs(n_u: int) -> np.ndarray:
    """Six dofs: node A fully, node B (opposite) in y, z, node C (quarter) in z."""
    if n_u % 4:
        raise ValueError("torus constraint placement needs n_u divisible by 4")
    A, B, C = 0, n_u // 2, n_u // 4
    return np.array([3 * A, 3 * A + 1, 3 * A + 2, 3 * B + 1, 3 * B + 2, 3 * C + 2])


def square_mesh(n_elems: int, degree: int = 2):
    """Doubly periodic unit square with element-local reference positions."""
    if n_elems < degree + 1:
        raise ValueError(f"periodic square needs at least {degree + 1} elements")
    space = build_structured_patch(degree, n_elems, n_elems, True, True)
    n = n_elems
    greville = ((np.arange(n) + (degree + 1) / 2) / n)
    ex = np.zeros((space.n_elements, space.max_local, 3))
    for k, el in enumerate(space.elements):
        (u0, u1), (v0, v1) = space.boxes[k]
        gu = greville[el.indices % n]
        gv = greville[el.indices // n]
        cu, cv = 0.5 * (u0 + u1), 0.5 * (v0 + v1)
        ex[k, :el.n_local, 0] = gu - np.round(gu - cu)
        ex[k, :el.n_local, 1] = gv - np.round(gv - cv)
    X = np.zeros((space.n_basis, 3))
    X[:, 0] = np.tile(greville, n)
    X[:, 1] = np.repeat(greville, n)
    return space, X, ex


# ---------------------------------------------------------------------------
# Scenario constructors
# ---------------------------------------------------------------------------

def build_square(n_elems: int = 64, degree: int = 2, params: MaterialParams | None = None,
                 phi_bar: float = 0.63, seed: int = 0, amplitude: float = 0.05,
                 lam: float = 1.0 / 9000.0, D: float = 1.0, t_end: float = 10.0,
                 integrator: IntegratorConfig | None = None) -> Scenario:
    """Rigid doubly periodic square (phase field only)."""
    space, X, ex = square_mesh(n_elems, degree)
    params = params or MaterialParams.two_phase(lam=lam, D=D)
    phi0 = initial_phase_field(space.n_basis, phi_bar, amplitude, seed)
    cfg = integrator or IntegratorConfig(dt0=1e-4, dt_max=0.25)
    return Scenario("square", space, X, params, phi0, np.zeros(0, dtype=np.int64), False,
                    0.0, cfg, t_end, ex,
                    {"n_elems": n_elems, "degree": degree, "phi_bar": phi_bar, "seed": seed})


def build_torus(R: float = 1.0, r: float = 0.25, n_u: int = 64, n_v: int = 16, degree: int = 2,
                params: MaterialParams | None = None, phi_bar: float = 1.0 / 3.0,
                p_int: float = 0.1, seed: int = 0, amplitude: float = 0.05,
                lam: float = 0.075, D: float = 4.0, t_end: float = 10000.0,
                rigid: bool = False, ic_base: tuple[int, int] | None = None,
                integrator: IntegratorConfig | None = None) -> Scenario:
    """Deforming torus under internal follower pressure.

    ``ic_base`` (``(n_v, n_u)``) draws the random perturbation on a coarser
    grid and subdivides it, giving identical initial fields across meshes.
    """
    space, X, meta = torus_mesh(R, r, n_u, n_v, degree)
    params = params or MaterialParams.two_phase(lam=lam, D=D)
    if ic_base is None:
        phi0 = initial_phase_field(space.n_basis, phi_bar, amplitude, seed)
    else:
        phi0 = prolonged_phase_field((n_v, n_u), tuple(ic_base), degree, phi_bar, amplitude, seed)
    cfg = integrator or IntegratorConfig(dt0=1e-4, dt_max=2.5)
    fixed = np.zeros(0, dtype=np.int64) if rigid else torus_fixed_dofs(n_u)
    meta.update({"R": R, "r": r, "n_u": n_u, "n_v": n_v, "degree": degree,
                 "phi_bar": phi_bar, "seed": seed})
    return Scenario("torus", space, X, params, phi0, fixed, not rigid, p_int, cfg, t_end,
                    None, meta)


def auto_fixed_dofs(X: np.ndarray) -> np.ndarray:
    """Statically determinate supports for a free closed surface.

    Node A (largest x) is fixed in x, y, z; node B (smallest x) in y, z;
    node C (largest |y|) in z.
    """
    A = int(np.argmax(X[:, 0]))
    B = int(np.argmin(X[:, 0]))
    C = int(np.argmax(np.abs(X[:, 1])))
    if len({A, B, C}) < 3:
        raise ValueError("cannot place supports: degenerate control net")
    return np.array([3 * A, 3 * A + 1, 3 * A + 2, 3 * B + 1, 3 * B + 2, 3 * C + 2])


def load_external_scenario(stream: IO[str] | str, params: MaterialParams,
                           phi_bar: float = 1.0 / 3.0, amplitude: float = 0.05, seed: int = 0,
                           p_int: float = 0.0, rigid: bool = True, t_end: float = 1.0,
                           fixed: np.ndarray | None = None,
                           integrator: IntegratorConfig | None = None) -> Scenario:
    """Scenario on a mesh read from an ``iga-extraction v1`` file with a nodes block."""
    if isinstance(stream, str) and "\n" not in stream:
        with open(stream, encoding="utf-8") as fh:
            space, nodes = load_extraction_mesh(fh)
    else:
        space, nodes = load_extraction_mesh(stream)
    if nodes is None:
        raise ValueError("external mesh has no 'nodes' block with control points")
    phi0 = initial_phase_field(space.n_basis, phi_bar, amplitude, seed)
    if rigid:
        fixed = np.zeros(0, dtype=np.int64)
    elif fixed is None:
        fixed = auto_fixed_dofs(nodes)
    cfg = integrator or IntegratorConfig()
    return Scenario("external", space, nodes, params, phi0, np.asarray(fixed, dtype=np.int64),
                    not rigid, p_int, cfg, t_end, None, {"phi_bar": phi_bar, "seed": seed})


def surface_area(space: SplineSpace, X: np.ndarray, points: int = 6) -> float:
    """Area by Gauss quadrature with ``points`` per direction."""
    xi, w = gauss_rule(points)
    g = point_geometry(tabulate(space, xi), X)
    return float(np.sum(g.area * w))
