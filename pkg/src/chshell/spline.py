"""C1/C2 spline bases through per-element Bezier extraction.

Every element is mapped to the unit square ``[0, 1]^2``; the extraction
operator ``C_e`` expresses the spline functions supported on the element in
the tensor-product Bernstein basis of that square,

    N_i|_e = sum_b C_e[i, b] B_b .

Structured (optionally periodic) NURBS patches are generated here by knot
insertion.  Unstructured spaces are read from the line-oriented
``iga-extraction v1`` text format (see :func:`load_extraction_mesh`).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from math import comb
from typing import IO, Iterable, Sequence

import numpy as np


class SplineError(ValueError):
    """Invalid spline configuration (degree, knots, element counts)."""


class MeshFormatError(ValueError):
    """Malformed or inconsistent extraction file."""

    def __init__(self, message: str, line: int | None = None, element: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if element is not None:
            where.append(f"element {element}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.element = element


# ---------------------------------------------------------------------------
# Bernstein polynomials and quadrature
# ---------------------------------------------------------------------------

def bernstein_eval(degree: int, xi, order: int = 0) -> np.ndarray:
    """Evaluate the 1D Bernstein basis of ``degree`` and its derivatives.

    Parameters
    ----------
    degree : int
        Polynomial degree ``p``.
    xi : float or array_like
        Evaluation point(s) in ``[0, 1]``.
    order : int
        Highest derivative order returned (0, 1 or 2).

    Returns
    -------
    numpy.ndarray
        Shape ``(order + 1, p + 1)`` for scalar ``xi``, otherwise
        ``(order + 1, len(xi), p + 1)``.  Index 0 holds the values.

    Raises
    ------
    ValueError
        If any ``xi`` lies outside ``[0, 1]``.
    """
    if degree < 0:
        raise SplineError(f"degree must be >= 0, got {degree}")
    if order not in (0, 1, 2):
        raise ValueError(f"order must be 0, 1 or 2, got {order}")
    x = np.asarray(xi, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    if np.any(x < 0.0) or np.any(x > 1.0) or np.any(~np.isfinite(x)):
        raise ValueError(f"Bernstein parameter outside [0, 1]: {xi}")
    out = np.zeros((order + 1, x.size, degree + 1))
    out[0] = _bernstein_values(degree, x)
    # d/dx B_{i,p} = p (B_{i-1,p-1} - B_{i,p-1})
    for k in range(1, order + 1):
        if degree - k < 0:
            break
        low = _bernstein_values(degree - k, x)
        # k-th derivative: p!/(p-k)! * sum_j (-1)^(k-j) C(k,j) B_{i-j,p-k}
        scale = float(np.prod(np.arange(degree - k + 1, degree + 1)))
        acc = np.zeros((x.size, degree + 1))
        for j in range(k + 1):
            sign = (-1) ** (k - j)
            acc[:, j:j + degree - k + 1] += sign * comb(k, j) * low
        out[k] = scale * acc
    return out[:, 0, :] if scalar else out


def _bernstein_values(degree: int, x: np.ndarray) -> np.ndarray:
    i = np.arange(degree + 1)
    binom = np.array([comb(degree, k) for k in i], dtype=float)
    xs = x[:, None]
    return binom * xs ** i * (1.0 - xs) ** (degree - i)


def gauss_rule(points: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor-product Gauss-Legendre rule on the unit square.

    Returns ``(xi, w)`` with ``xi`` of shape ``(points**2, 2)`` (first
    coordinate fastest) and weights summing to one.
    """
    if not 1 <= points <= 10:
        raise ValueError(f"points per direction must be in [1, 10], got {points}")
    x, w = np.polynomial.legendre.leggauss(points)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    xi = np.array([(x[i], x[j]) for j in range(points) for i in range(points)])
    weights = np.array([w[i] * w[j] for j in range(points) for i in range(points)])
    return xi, weights


# ---------------------------------------------------------------------------
# Knot vectors and 1D extraction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KnotVector:
    """Knot vector of a 1D spline basis.

    For open vectors ``knots`` is the full clamped sequence.  For periodic
    vectors ``knots`` lists the knots inside one period ``[knots[0],
    knots[0] + period)``; the number of basis functions then equals the number
    of knots.
    """

    degree: int
    knots: tuple[float, ...]
    periodic: bool = False
    period: float = 0.0

    def __post_init__(self):
        p = self.degree
        t = np.asarray(self.knots, dtype=float)
        if p < 2:
            raise SplineError(f"degree {p} < 2 cannot give a C1 basis")
        if np.any(np.diff(t) < 0):
            raise SplineError("knots must be non-decreasing")
        if self.periodic:
            if self.period <= 0 or t[-1] >= t[0] + self.period:
                raise SplineError("periodic knots must lie inside one period")
            _, mult = np.unique(t, return_counts=True)
            if mult.max() > p:
                raise SplineError("periodic knot multiplicity exceeds degree")
            if t.size < p + 1:
                raise SplineError(
                    f"periodic direction needs at least {p + 1} basis functions, got {t.size}")
        else:
            if t.size < 2 * (p + 1):
                raise SplineError("open knot vector too short")
            if np.any(t[:p + 1] != t[0]) or np.any(t[-p - 1:] != t[-1]):
                raise SplineError("open knot vectors must be clamped (end multiplicity p+1)")

    @classmethod
    def uniform(cls, degree: int, n_elems: int, periodic: bool = False,
                length: float = 1.0) -> "KnotVector":
        if n_elems < 1:
            raise SplineError("need at least one element")
        if periodic and n_elems < degree + 1:
            raise SplineError(
                f"periodic wrap needs >= {degree + 1} elements, got {n_elems}")
        breaks = np.linspace(0.0, length, n_elems + 1)
        if periodic:
            return cls(degree, tuple(breaks[:-1]), True, length)
        knots = [0.0] * degree + list(breaks) + [length] * degree
        return cls(degree, tuple(knots), False)

    @property
    def n_basis(self) -> int:
        if self.periodic:
            return len(self.knots)
        return len(self.knots) - self.degree - 1

    def _extended(self) -> tuple[np.ndarray, int]:
        """Knot sequence on which the periodic basis is an ordinary B-spline basis.

        Returns the sequence and the offset such that extended basis ``m``
        is global basis ``(m - offset) mod n``.
        """
        t = np.asarray(self.knots, dtype=float)
        n, p = t.size, self.degree
        ks = np.arange(-(p + 1), n + p + 2)
        ext = t[ks % n] + self.period * np.floor_divide(ks, n)
        return ext, p + 1

    def extraction(self) -> list[tuple[np.ndarray, np.ndarray, tuple[float, float]]]:
        """Per-element ``(global indices, C, (a, b))`` with ``N = C @ Bernstein``."""
        p = self.degree
        if self.periodic:
            t, offset = self._extended()
            n = len(self.knots)
            lo, hi = t[offset], t[offset + n]
        else:
            t = np.asarray(self.knots, dtype=float)
            offset, n = 0, self.n_basis
            lo, hi = t[p], t[-p - 1]
        nb = t.size - p - 1
        coeff = np.eye(nb)
        refined = t.copy()
        for brk in np.unique(t[(t >= lo) & (t <= hi)]):
            mult = int(np.sum(refined == brk))
            for _ in range(max(0, p - mult)):
                refined, coeff = _insert_knot(refined, p, brk, coeff)
        out = []
        for j in range(t.size - 1):
            a, b = t[j], t[j + 1]
            if not (a < b and a >= lo and b <= hi):
                continue
            k = np.searchsorted(refined, a, side="right") - 1
            cols = np.arange(k - p, k + 1)
            rows = np.arange(j - p, j + 1)
            c = coeff[np.ix_(rows, cols)]
            glob = rows - offset
            if self.periodic:
                glob = glob % n
            out.append((glob.astype(np.int64), c, (float(a), float(b))))
        return out


def _insert_knot(knots: np.ndarray, p: int, tbar: float, coeff: np.ndarray):
    """Boehm insertion applied to the coefficient rows of ``coeff``."""
    k = np.searchsorted(knots, tbar, side="right") - 1
    ncur = coeff.shape[1]
    a = np.zeros((ncur + 1, ncur))
    for i in range(ncur + 1):
        if i <= k - p:
            alpha = 1.0
        elif i >= k + 1:
            alpha = 0.0
        else:
            alpha = (tbar - knots[i]) / (knots[i + p] - knots[i])
        if i < ncur:
            a[i, i] += alpha
        if i >= 1:
            a[i, i - 1] += 1.0 - alpha
    return np.insert(knots, k + 1, tbar), coeff @ a.T


# ---------------------------------------------------------------------------
# Spline spaces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExtractionElement:
    id: int
    indices: np.ndarray
    coeffs: np.ndarray
    weights: np.ndarray | None = None

    @property
    def n_local(self) -> int:
        return int(self.indices.size)


@dataclass(frozen=True)
class BasisEval:
    """Basis values and parametric derivatives on one element.

    ``d2`` stores the second derivatives in the order (11, 12, 22).
    """

    indices: np.ndarray
    values: np.ndarray
    d1: np.ndarray
    d2: np.ndarray


@dataclass(frozen=True)
class Tabulation:
    """Basis data for all elements at a shared set of local points.

    Elements with fewer local functions than ``n_local`` are padded with
    zero functions pointing to basis 0, which contribute nothing.
    """

    indices: np.ndarray   # (E, n)
    N: np.ndarray         # (E, Q, n)
    dN: np.ndarray        # (E, Q, 2, n)
    ddN: np.ndarray       # (E, Q, 3, n)
    points: np.ndarray    # (Q, 2)


@dataclass(frozen=True, eq=False)
class SplineSpace:
    """Collection of extraction elements over a quadrilateral mesh."""

    degree: int
    elements: tuple[ExtractionElement, ...]
    n_basis: int
    boxes: np.ndarray | None = None
    grid: tuple[int, int] | None = None
    periodic: tuple[bool, bool] = (False, False)
    _lookup: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._lookup.update({el.id: k for k, el in enumerate(self.elements)})
        used = np.zeros(self.n_basis, dtype=bool)
        for el in self.elements:
            if el.indices.min() < 0 or el.indices.max() >= self.n_basis:
                raise MeshFormatError("basis index out of range", element=el.id)
            used[el.indices] = True
        if not used.all():
            missing = np.flatnonzero(~used)[:5]
            raise MeshFormatError(f"basis functions {missing.tolist()} belong to no element")

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_bernstein(self) -> int:
        return (self.degree + 1) ** 2

    def element(self, eid: int) -> ExtractionElement:
        try:
            return self.elements[self._lookup[eid]]
        except KeyError:
            raise KeyError(f"unknown element id {eid}") from None

    @property
    def max_local(self) -> int:
        return max(el.n_local for el in self.elements)

    @property
    def is_rational(self) -> bool:
        return any(el.weights is not None for el in self.elements)


def _bernstein_2d(degree: int, xi: np.ndarray):
    """Values, first and second derivatives of the 2D Bernstein basis.

    Returns arrays of shape (Q, nb), (Q, 2, nb), (Q, 3, nb).
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    bu = bernstein_eval(degree, xi[:, 0], 2)
    bv = bernstein_eval(degree, xi[:, 1], 2)
    q = xi.shape[0]

    def tp(a, b):
        return (b[:, :, None] * a[:, None, :]).reshape(q, -1)

    B = tp(bu[0], bv[0])
    dB = np.stack([tp(bu[1], bv[0]), tp(bu[0], bv[1])], axis=1)
    ddB = np.stack([tp(bu[2], bv[0]), tp(bu[1], bv[1]), tp(bu[0], bv[2])], axis=1)
    return B, dB, ddB


def _rationalize(N, dN, ddN, w):
    """Apply NURBS weights.  Arrays carry the basis index in the last axis."""
    wN = N * w
    W = wN.sum(-1, keepdims=True)
    wd = dN * w[..., None, :] if w.ndim == N.ndim else dN * w
    Wd = wd.sum(-1, keepdims=True)
    wdd = ddN * w[..., None, :] if w.ndim == N.ndim else ddN * w
    Wdd = wdd.sum(-1, keepdims=True)
    R = wN / W
    R1 = (wd[..., 0, :] - R * Wd[..., 0, :]) / W
    R2 = (wd[..., 1, :] - R * Wd[..., 1, :]) / W
    R11 = (wdd[..., 0, :] - 2 * R1 * Wd[..., 0, :] - R * Wdd[..., 0, :]) / W
    R12 = (wdd[..., 1, :] - R1 * Wd[..., 1, :] - R2 * Wd[..., 0, :] - R * Wdd[..., 1, :]) / W
    R22 = (wdd[..., 2, :] - 2 * R2 * Wd[..., 1, :] - R * Wdd[..., 2, :]) / W
    axis = N.ndim - 1
    return R, np.stack([R1, R2], axis=axis), np.stack([R11, R12, R22], axis=axis)


def element_basis(space: SplineSpace, eid: int, xi: Sequence[float]) -> BasisEval:
    """Evaluate all functions supported on element ``eid`` at local point ``xi``."""
    el = space.element(eid)
    xi = np.asarray(xi, dtype=float).reshape(1, 2)
    B, dB, ddB = _bernstein_2d(space.degree, xi)
    N = el.coeffs @ B[0]
    dN = np.einsum("nb,ab->an", el.coeffs, dB[0])
    ddN = np.einsum("nb,ab->an", el.coeffs, ddB[0])
    if el.weights is not None:
        N, dN, ddN = _rationalize(N, dN, ddN, el.weights)
    return BasisEval(el.indices.copy(), N, dN, ddN)


def tabulate(space: SplineSpace, xi: np.ndarray) -> Tabulation:
    """Evaluate every element at the local points ``xi`` (shape (Q, 2))."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    B, dB, ddB = _bernstein_2d(space.degree, xi)
    E, n = space.n_elements, space.max_local
    C = np.zeros((E, n, space.n_bernstein))
    idx = np.zeros((E, n), dtype=np.int64)
    w = np.ones((E, n))
    for k, el in enumerate(space.elements):
        m = el.n_local
        C[k, :m] = el.coeffs
        idx[k, :m] = el.indices
        if el.weights is not None:
            w[k, :m] = el.weights
    N = np.einsum("enb,qb->eqn", C, B)
    dN = np.einsum("enb,qab->eqan", C, dB)
    ddN = np.einsum("enb,qab->eqan", C, ddB)
    if space.is_rational:
        wq = np.broadcast_to(w[:, None, :], N.shape)
        N, dN, ddN = _rationalize(N, dN, ddN, wq)
    return Tabulation(idx, N, dN, ddN, xi)


def build_structured_patch(degree: int, elems_u: int, elems_v: int,
                           periodic_u: bool = False, periodic_v: bool = False,
                           weights: np.ndarray | None = None,
                           knots_u: KnotVector | None = None,
                           knots_v: KnotVector | None = None) -> SplineSpace:
    """Tensor-product spline patch on uniform (or supplied) knot vectors.

    Parameters
    ----------
    degree : int
        Polynomial degree in both directions (>= 2).
    elems_u, elems_v : int
        Element counts; ignored for a direction whose knot vector is given.
    periodic_u, periodic_v : bool
        Wrap the basis in that direction (index wrapping, no ghost points).
    weights : array_like, optional
        NURBS weights per global basis function, shape ``(n_v, n_u)`` or
        flattened with ``u`` fastest.
    knots_u, knots_v : KnotVector, optional
        Explicit knot vectors (e.g. repeated knots for exact conics).

    Returns
    -------
    SplineSpace
        Global basis index ``j * n_u + i``; elements ordered with ``u``
        fastest.  ``boxes`` holds each element's parametric box.
    """
    ku = knots_u or KnotVector.uniform(degree, elems_u, periodic_u)
    kv = knots_v or KnotVector.uniform(degree, elems_v, periodic_v)
    if ku.degree != degree or kv.degree != degree:
        raise SplineError("knot vector degree mismatch")
    ext_u, ext_v = ku.extraction(), kv.extraction()
    nu, nv = ku.n_basis, kv.n_basis
    w = None
    if weights is not None:
        w = np.asarray(weights, dtype=float).reshape(-1)
        if w.size != nu * nv:
            raise SplineError(f"expected {nu * nv} weights, got {w.size}")
        if np.any(w <= 0):
            raise SplineError("NURBS weights must be positive")
    elements, boxes = [], []
    for jv, (gv, cv, bv) in enumerate(ext_v):
        for ju, (gu, cu, bu) in enumerate(ext_u):
            idx = (gv[:, None] * nu + gu[None, :]).reshape(-1)
            coeffs = np.kron(cv, cu)
            ew = None if w is None else w[idx]
            elements.append(ExtractionElement(len(elements), idx, coeffs, ew))
            boxes.append([bu, bv])
    return SplineSpace(degree, tuple(elements), nu * nv, np.array(boxes),
                       (len(ext_u), len(ext_v)), (ku.periodic, kv.periodic))


def locate(space: SplineSpace, u: float, v: float) -> tuple[int, np.ndarray]:
    """Element id and local coordinates of a global parameter (structured patches)."""
    if space.boxes is None:
        raise SplineError("space has no global parametrization")
    bx = space.boxes
    hit = np.flatnonzero((bx[:, 0, 0] <= u) & (u <= bx[:, 0, 1])
                         & (bx[:, 1, 0] <= v) & (v <= bx[:, 1, 1]))
    if hit.size == 0:
        raise ValueError(f"parameter ({u}, {v}) outside the patch")
    e = int(hit[0])
    loc = np.array([(u - bx[e, 0, 0]) / (bx[e, 0, 1] - bx[e, 0, 0]),
                    (v - bx[e, 1, 0]) / (bx[e, 1, 1] - bx[e, 1, 0])])
    return e, np.clip(loc, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def _sample_grid(k: int = 4) -> np.ndarray:
    s = np.linspace(0.0, 1.0, k)
    return np.array([(a, b) for b in s for a in s])


def check_partition_of_unity(space: SplineSpace, tol: float = 1e-10) -> None:
    """Raise :class:`MeshFormatError` naming the first element violating PoU."""
    B, _, _ = _bernstein_2d(space.degree, _sample_grid())
    for el in space.elements:
        # the polynomial basis must sum to one; weights then only reshape it
        vals = el.coeffs @ B.T
        err = np.abs(vals.sum(0) - 1.0).max()
        if not np.isfinite(err) or err > tol:
            raise MeshFormatError(f"basis is not a partition of unity (error {err:.3e})",
                                  element=el.id)


_EDGES = {
    # edge -> (fixed coordinate axis, fixed value)
    0: (1, 0.0), 1: (0, 1.0), 2: (1, 1.0), 3: (0, 0.0),
}


def _edge_points(edge: int, s: np.ndarray) -> np.ndarray:
    axis, val = _EDGES[edge]
    pts = np.zeros((s.size, 2))
    pts[:, axis] = val
    pts[:, 1 - axis] = s
    return pts


def _edge_trace(space, el, edge, s):
    pts = _edge_points(edge, s)
    vals = np.array([element_basis(space, el.id, p).values for p in pts])
    return pts, vals


@dataclass
class ContinuityReport:
    edges_checked: int
    c0_jump: float
    c1_jump: float
    negative_min: float

    def ok(self, tol: float = 1e-9) -> bool:
        return self.c0_jump <= tol and self.c1_jump <= tol


def edge_continuity(space: SplineSpace, samples: int = 5, max_edges: int | None = None,
                    seed: int = 0) -> ContinuityReport:
    """Spot-check value and first-derivative continuity across shared edges.

    Neighbouring edges are found by matching the traces of the basis along
    each edge (up to reversal).  The derivative transverse to the edge is
    compared with the sign implied by the relative orientation of the two
    elements; this is exact for tensor-product regions and meshes whose
    neighbouring parametrizations agree across edges.
    """
    rng = np.random.default_rng(seed)
    s = np.sort(rng.uniform(0.05, 0.95, samples))
    traces = {}
    negative_min = 0.0
    for el in space.elements:
        for edge in range(4):
            pts, vals = _edge_trace(space, el, edge, s)
            negative_min = min(negative_min, float(vals.min()))
            active = frozenset(int(el.indices[i]) for i in np.flatnonzero(np.abs(vals).max(0) > 1e-12))
            traces.setdefault(active, []).append((el, edge, pts, vals))
    c0 = c1 = 0.0
    checked = 0
    groups = [g for g in traces.values() if len(g) == 2]
    if max_edges is not None and len(groups) > max_edges:
        pick = rng.choice(len(groups), max_edges, replace=False)
        groups = [groups[i] for i in pick]
    for (ea, eda, pa, _), (eb, edb, _, _) in groups:
        best = None
        for reverse in (False, True):
            sb = s[::-1] if reverse else s
            pb = _edge_points(edb, sb)
            jump0, jump1 = _compare_edge(space, ea, eda, pa, eb, edb, pb)
            if best is None or jump0 < best[0]:
                best = (jump0, jump1)
        checked += 1
        c0 = max(c0, best[0])
        c1 = max(c1, best[1])
    return ContinuityReport(checked, c0, c1, negative_min)


def _compare_edge(space, ea, eda, pa, eb, edb, pb):
    j0 = j1 = 0.0
    for qa, qb in zip(pa, pb):
        ba = element_basis(space, ea.id, qa)
        bb = element_basis(space, eb.id, qb)
        va = dict(zip(ba.indices.tolist(), range(ba.indices.size)))
        vb = dict(zip(bb.indices.tolist(), range(bb.indices.size)))
        keys = set(va) | set(vb)
        axa, _ = _EDGES[eda]
        axb, _ = _EDGES[edb]
        # outward transverse derivative on each side; continuity means da = -db
        sa = 1.0 if eda in (1, 2) else -1.0
        sb = 1.0 if edb in (1, 2) else -1.0
        for key in keys:
            xa = ba.values[va[key]] if key in va else 0.0
            xb = bb.values[vb[key]] if key in vb else 0.0
            j0 = max(j0, abs(xa - xb))
            da = sa * ba.d1[axa, va[key]] if key in va else 0.0
            db = sb * bb.d1[axb, vb[key]] if key in vb else 0.0
            j1 = max(j1, abs(da + db))
    return j0, j1


# ---------------------------------------------------------------------------
# Extraction file format
# ---------------------------------------------------------------------------

def _tokens(stream: IO[str]):
    for lineno, raw in enumerate(stream, start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def load_extraction_mesh(stream: IO[str] | str, validate: bool = True
                         ) -> tuple[SplineSpace, np.ndarray | None]:
    """Parse an ``iga-extraction v1`` file.

    Grammar (``#`` starts a comment, blank lines are ignored)::

        iga-extraction v1
        degree <p>
        nbasis <n>
        nelem <m>
        element <id> <ne>            # repeated m times
        <ne global indices>
        <(p+1)^2 reals>              # ne rows, row-major extraction matrix
        weights <ne reals>           # optional, NURBS weights
        nodes <n>                    # optional control point block
        <x y z>                      # n rows

    Returns
    -------
    space : SplineSpace
    nodes : numpy.ndarray or None
        Control points ``(n, 3)`` if the file carries a ``nodes`` block.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    toks = _tokens(stream)

    def expect(keyword: str, nargs: int):
        try:
            lineno, words = next(toks)
        except StopIteration:
            raise MeshFormatError(f"unexpected end of file, expected '{keyword}'") from None
        if words[0] != keyword or len(words) != nargs + 1:
            raise MeshFormatError(f"expected '{keyword}' with {nargs} argument(s), got {' '.join(words)!r}",
                                  line=lineno)
        return lineno, words[1:]

    lineno, words = next(toks, (1, []))
    if words != ["iga-extraction", "v1"]:
        raise MeshFormatError("missing header 'iga-extraction v1'", line=lineno)
    p = _parse_int(*expect("degree", 1))
    n = _parse_int(*expect("nbasis", 1))
    m = _parse_int(*expect("nelem", 1))
    if p < 2:
        raise MeshFormatError(f"degree {p} < 2 is not C1", line=lineno)
    nb = (p + 1) ** 2
    elements = []
    pending = None
    nodes = None
    for _ in range(m):
        if pending is not None:
            lineno, words = pending
            pending = None
        else:
            try:
                lineno, words = next(toks)
            except StopIteration:
                raise MeshFormatError(f"file ends after {len(elements)} of {m} elements") from None
        if words[0] != "element" or len(words) != 3:
            raise MeshFormatError(f"expected 'element <id> <ne>', got {' '.join(words)!r}", line=lineno)
        eid, ne = _parse_int(lineno, [words[1]]), _parse_int(lineno, [words[2]])
        lineno, words = _next(toks, eid)
        idx = _parse_row(lineno, words, ne, int, eid)
        if np.any(idx < 0) or np.any(idx >= n):
            raise MeshFormatError(f"basis index outside [0, {n})", line=lineno, element=eid)
        rows = []
        for _ in range(ne):
            lineno, words = _next(toks, eid)
            rows.append(_parse_row(lineno, words, nb, float, eid))
        weights = None
        nxt = next(toks, None)
        if nxt is not None and nxt[1][0] == "weights":
            weights = _parse_row(nxt[0], nxt[1][1:], ne, float, eid)
            if np.any(weights <= 0):
                raise MeshFormatError("weights must be positive", line=nxt[0], element=eid)
        else:
            pending = nxt
        elements.append(ExtractionElement(eid, idx.astype(np.int64), np.array(rows), weights))
    tail = pending if pending is not None else next(toks, None)
    if tail is not None:
        lineno, words = tail
        if words[0] != "nodes" or len(words) != 2:
            raise MeshFormatError(f"trailing content {' '.join(words)!r}", line=lineno)
        count = _parse_int(lineno, words[1:])
        if count != n:
            raise MeshFormatError(f"nodes block has {count} entries, expected {n}", line=lineno)
        nodes = np.empty((n, 3))
        for k in range(n):
            lineno, words = _next(toks, None)
            nodes[k] = _parse_row(lineno, words, 3, float, None)
        extra = next(toks, None)
        if extra is not None:
            raise MeshFormatError(f"trailing content {' '.join(extra[1])!r}", line=extra[0])
    if len({el.id for el in elements}) != len(elements):
        raise MeshFormatError("duplicate element ids")
    space = SplineSpace(p, tuple(elements), n)
    if validate:
        check_partition_of_unity(space)
    return space, nodes


def _next(toks, eid):
    try:
        return next(toks)
    except StopIteration:
        raise MeshFormatError("unexpected end of file", element=eid) from None


def _parse_int(lineno, words):
    try:
        return int(words[0])
    except ValueError:
        raise MeshFormatError(f"expected integer, got {words[0]!r}", line=lineno) from None


def _parse_row(lineno, words, count, kind, eid):
    if len(words) != count:
        raise MeshFormatError(f"expected {count} values, got {len(words)}", line=lineno, element=eid)
    try:
        return np.array([kind(w) for w in words])
    except ValueError:
        raise MeshFormatError("non-numeric value", line=lineno, element=eid) from None


def write_extraction_mesh(space: SplineSpace, stream: IO[str],
                          nodes: np.ndarray | None = None) -> None:
    """Write ``space`` (and optionally its control points) in ``iga-extraction v1``."""
    w = stream.write
    w("iga-extraction v1\n")
    w(f"degree {space.degree}\nnbasis {space.n_basis}\nnelem {space.n_elements}\n")
    for el in space.elements:
        w(f"element {el.id} {el.n_local}\n")
        w(" ".join(str(int(i)) for i in el.indices) + "\n")
        for row in el.coeffs:
            w(" ".join(repr(float(c)) for c in row) + "\n")
        if el.weights is not None:
            w("weights " + " ".join(repr(float(c)) for c in el.weights) + "\n")
    if nodes is not None:
        w(f"nodes {len(nodes)}\n")
        for x in np.asarray(nodes, dtype=float):
            w(" ".join(repr(float(c)) for c in x) + "\n")


def evaluate_field(space: SplineSpace, eid: int, xi: Iterable[float], coeffs: np.ndarray) -> np.ndarray:
    """Evaluate ``sum_i N_i(xi) coeffs[i]`` on element ``eid``."""
    b = element_basis(space, eid, xi)
    return b.values @ np.asarray(coeffs)[b.indices]
