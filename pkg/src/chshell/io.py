"""Configuration, result files, checkpoints and the simulation driver.

Configuration files hold one ``dotted.key = value`` pair per line.  Values
are Python literals (numbers, quoted strings, booleans, lists); bare words
are read as strings.  ``#`` starts a comment.  Unknown keys are rejected
together with their line number.
"""

from __future__ import annotations

import ast
import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field, fields
from fractions import Fraction
from typing import IO, Callable, Iterable

import numpy as np

from . import constitutive as cm
from .constitutive import MaterialParams
from .geometry import surface_points
from .integrator import GeneralizedAlpha, IntegratorConfig, SimState, StepReport
from .scenarios import Scenario, build_square, build_torus, load_external_scenario
from .spline import tabulate

log = logging.getLogger(__name__)

CSV_HEADER = ("step", "t", "dt", "err_p", "err_d", "newton_iters", "psi_total", "psi_el",
              "psi_ch", "mass", "phi_min", "phi_max")


class ConfigError(ValueError):
    """Invalid configuration; carries the offending line when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


_STR, _INT, _FLOAT, _BOOL, _LIST = "str", "int", "float", "bool", "list"

# key -> (kind, default); ``None`` defers to the scenario builder's default
SCHEMA: dict[str, tuple[str, object]] = {
    "mesh.type": (_STR, "torus"),
    "mesh.n_u": (_INT, None),
    "mesh.n_v": (_INT, None),
    "mesh.degree": (_INT, 2),
    "mesh.R": (_FLOAT, 1.0),
    "mesh.r": (_FLOAT, 0.25),
    "mesh.file": (_STR, None),
    "mesh.rigid": (_BOOL, None),
    "mesh.fixed": (_LIST, None),
    "material.E": (_FLOAT, 1.0),
    "material.nu": (_FLOAT, 0.3),
    **{f"material.{k}": (_FLOAT, None)
       for k in ("K0", "K1", "G0", "G1", "c0", "c1", "eta0", "eta1")},
    "material.rho_sh": (_FLOAT, 1.25),
    "material.omega": (_FLOAT, 1.0),
    "material.theta": (_FLOAT, 1.0 / 3.0),
    "material.rho": (_FLOAT, 1.0),
    "phase.phi_bar": (_FLOAT, None),
    "phase.amplitude": (_FLOAT, 0.05),
    "phase.seed": (_INT, 0),
    "phase.lambda": (_FLOAT, None),
    "phase.D": (_FLOAT, None),
    "phase.ic_base": (_LIST, None),
    "load.p_int": (_FLOAT, None),
    "time.t_end": (_FLOAT, None),
    "time.dt0": (_FLOAT, 1e-4),
    "time.dt_min": (_FLOAT, 1e-12),
    "time.dt_max": (_FLOAT, None),
    "time.rho_inf": (_FLOAT, 0.5),
    "time.tol_newton": (_FLOAT, 1e-4),
    "time.tol_p": (_FLOAT, 7.5e-5),
    "time.tol_d": (_FLOAT, 7.5e-5),
    "time.reject": (_FLOAT, 1e-4),
    "time.max_newton": (_INT, 15),
    "time.max_retries": (_INT, 8),
    "time.max_steps": (_INT, None),
    "time.steady_tol": (_FLOAT, None),
    "output.snapshot_every": (_INT, None),
    "output.snapshot_dt": (_FLOAT, None),
    "output.checkpoint_every": (_INT, None),
}

_DEFAULTS = {
    "square": {"mesh.n_u": 64, "mesh.rigid": True, "phase.phi_bar": 0.63,
               "phase.lambda": 1.0 / 9000.0, "phase.D": 1.0, "load.p_int": 0.0,
               "time.t_end": 10.0, "time.dt_max": 0.25},
    "torus": {"mesh.n_u": 64, "mesh.rigid": False, "phase.phi_bar": 1.0 / 3.0,
              "phase.lambda": 0.075, "phase.D": 4.0, "load.p_int": 0.1,
              "time.t_end": 10000.0, "time.dt_max": 2.5},
    "external": {"mesh.rigid": True, "phase.phi_bar": 1.0 / 3.0, "phase.lambda": 0.075,
                 "phase.D": 1.0, "load.p_int": 0.0, "time.t_end": 1.0, "time.dt_max": 0.25},
}


def _coerce(key: str, raw: str, line: int | None):
    kind = SCHEMA[key][0]
    text = raw.strip()
    try:
        value = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        try:
            value = float(Fraction(text))          # ratios such as 1/9000
        except (ValueError, ZeroDivisionError):
            value = text
    if isinstance(value, str) and kind != _STR:
        low = value.lower()
        if kind == _BOOL and low in ("true", "false", "yes", "no", "on", "off"):
            return low in ("true", "yes", "on")
        raise ConfigError(f"{key}: expected {kind}, got {text!r}", line)
    if kind == _STR:
        return str(value)
    if kind == _BOOL:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected bool, got {text!r}", line)
    if kind == _INT:
        if isinstance(value, bool) or not float(value).is_integer():
            raise ConfigError(f"{key}: expected integer, got {text!r}", line)
        return int(value)
    if kind == _FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected number, got {text!r}", line)
        value = float(value)
        if not math.isfinite(value):
            raise ConfigError(f"{key}: value must be finite", line)
        return value
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{key}: expected list, got {text!r}", line)
    return list(value)


def parse_pairs(stream: IO[str] | str) -> dict[str, tuple[object, int | None]]:
    """Parse ``key = value`` lines into ``{key: (value, line)}``."""
    text = stream if isinstance(stream, str) else stream.read()
    out: dict[str, tuple[object, int | None]] = {}
    for no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", no)
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", no)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", no)
        out[key] = (_coerce(key, raw, no), no)
    return out


def apply_overrides(pairs: dict, overrides: Iterable[str]) -> dict:
    pairs = dict(pairs)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = (s.strip() for s in item.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown override key {key!r}")
        pairs[key] = (_coerce(key, raw, None), None)
    return pairs


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings of one run."""

    values: dict
    source: str = ""
    out_dir: str = "output"
    snapshot_every: int | None = None
    snapshot_dt: float | None = None
    checkpoint_every: int | None = None
    verbosity: int = 0
    overrides: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("snapshot_every", "snapshot_dt", "checkpoint_every"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise ConfigError(f"output.{name} must be positive")

    def get(self, key: str):
        return self.values[key]


def resolve(pairs: dict) -> dict:
    """Fill defaults for every schema key (scenario-type aware)."""
    kind = pairs.get("mesh.type", ("torus", None))[0]
    if kind not in _DEFAULTS:
        raise ConfigError(f"mesh.type must be one of {sorted(_DEFAULTS)}, got {kind!r}",
                          pairs["mesh.type"][1])
    values = {k: v for k, (_, v) in SCHEMA.items()}
    values.update(_DEFAULTS[kind])
    values.update({k: v for k, (v, _) in pairs.items()})
    if kind == "torus" and values["mesh.n_v"] is None:
        values["mesh.n_v"] = max(4, values["mesh.n_u"] // 4)
    if kind == "square" and values["mesh.n_v"] not in (None, values["mesh.n_u"]):
        raise ConfigError("the square mesh uses mesh.n_u elements per side; omit mesh.n_v")
    if kind == "external" and not values["mesh.file"]:
        raise ConfigError("mesh.type = external requires mesh.file")
    return values


def build_params(values: dict) -> MaterialParams:
    over = {k: values[f"material.{k}"]
            for k in ("K0", "K1", "G0", "G1", "c0", "c1", "eta0", "eta1")
            if values[f"material.{k}"] is not None}
    return MaterialParams.two_phase(values["material.E"], values["material.nu"],
                                 rho_sh=values["material.rho_sh"], omega=values["material.omega"],
                                 theta=values["material.theta"], rho=values["material.rho"],
                                 lam=values["phase.lambda"], D=values["phase.D"], **over)


def build_integrator(values: dict) -> IntegratorConfig:
    return IntegratorConfig(rho_inf=values["time.rho_inf"], tol_newton=values["time.tol_newton"],
                            max_newton=values["time.max_newton"], tol_p=values["time.tol_p"],
                            tol_d=values["time.tol_d"], reject=values["time.reject"],
                            dt0=values["time.dt0"], dt_min=values["time.dt_min"],
                            dt_max=values["time.dt_max"], max_retries=values["time.max_retries"])


def build_scenario(values: dict, base_dir: str = ".") -> Scenario:
    try:
        params = build_params(values)
        cfg = build_integrator(values)
        kind = values["mesh.type"]
        common = dict(params=params, phi_bar=values["phase.phi_bar"], seed=values["phase.seed"],
                      amplitude=values["phase.amplitude"], integrator=cfg)
        if kind == "square":
            return build_square(values["mesh.n_u"], values["mesh.degree"],
                                t_end=values["time.t_end"], **common)
        if kind == "torus":
            base = values["phase.ic_base"]
            return build_torus(values["mesh.R"], values["mesh.r"], values["mesh.n_u"],
                               values["mesh.n_v"], values["mesh.degree"],
                               p_int=values["load.p_int"], t_end=values["time.t_end"],
                               rigid=values["mesh.rigid"],
                               ic_base=tuple(base) if base is not None else None, **common)
        path = values["mesh.file"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        fixed = values["mesh.fixed"]
        return load_external_scenario(path, p_int=values["load.p_int"],
                                      rigid=values["mesh.rigid"], t_end=values["time.t_end"],
                                      fixed=np.asarray(fixed) if fixed is not None else None,
                                      **common)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(stream: IO[str] | str, overrides: Iterable[str] = (), out_dir: str = "output",
                 base_dir: str = ".", verbosity: int = 0) -> tuple[RunConfig, Scenario]:
    """Parse a configuration stream (or text) and build the scenario."""
    text = stream if isinstance(stream, str) else stream.read()
    overrides = tuple(overrides)
    pairs = apply_overrides(parse_pairs(text), overrides)
    values = resolve(pairs)
    rc = RunConfig(values, text, out_dir, values["output.snapshot_every"],
                   values["output.snapshot_dt"], values["output.checkpoint_every"], verbosity,
                   overrides)
    return rc, build_scenario(values, base_dir)


# ---------------------------------------------------------------------------
# Time series
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeSeriesRow:
    step: int
    t: float
    dt: float
    err_p: float
    err_d: float
    newton_iters: int
    psi_total: float
    psi_el: float
    psi_ch: float
    mass: float
    phi_min: float
    phi_max: float

    @classmethod
    def from_report(cls, report: StepReport, energies: dict, mass: float) -> "TimeSeriesRow":
        return cls(report.step, report.t, report.dt, report.err_p, report.err_d,
                   report.newton_iters, energies["psi_total"], energies["psi_el"],
                   energies["psi_ch"], mass, energies["phi_min"], energies["phi_max"])

    def cells(self) -> list[str]:
        return [format(getattr(self, f.name), ".17g") if isinstance(getattr(self, f.name), float)
                else str(getattr(self, f.name)) for f in fields(self)]


def write_timeseries(rows: Iterable[TimeSeriesRow], stream: IO[str], header: bool = True) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    if header:
        writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow(row.cells())


def read_timeseries(stream: IO[str]) -> list[dict]:
    reader = csv.DictReader(stream)
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ValueError("unexpected time series header")
    return [{k: (int(v) if k in ("step", "newton_iters") else float(v)) for k, v in r.items()}
            for r in reader]


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------

SNAPSHOT_FIELDS = ("phi", "gamma", "s", "gamma_el", "gamma_ch", "gamma_visc",
                   "s_el", "s_ch", "s_visc")


def snapshot_fields(model, state: SimState) -> tuple[np.ndarray, np.ndarray, dict]:
    """Sample positions and stress measures on a ``(p+1)^2`` lattice per element.

    Returns ``(points (E, m, 3), lattice size, fields)`` where every field has
    shape ``(E, m)``.
    """
    p = model.space.degree
    t = np.linspace(0.0, 1.0, p + 1)
    xi = np.stack(np.meshgrid(t, t), axis=-1).reshape(-1, 2)   # u fastest
    tab = tabulate(model.space, xi)
    ref = model.reference_geometry(tab)
    qs = model.quad_state(state.x, state.v, state.phi, tab=tab, ref=ref)
    g, st = qs.geom, qs.stress
    N_el = st.sigma_el + st.bend_correction
    parts = {"el": N_el, "ch": st.sigma_ch, "visc": st.sigma_visc}
    out = {"phi": qs.phi,
           "gamma": cm.surface_tension(st.total, g.metric),
           "s": cm.deviatoric_norm(st.total, g.metric, g.metric_inv)}
    for name, N in parts.items():
        out[f"gamma_{name}"] = cm.surface_tension(N, g.metric)
        out[f"s_{name}"] = cm.deviatoric_norm(N, g.metric, g.metric_inv)
    if model.element_X is not None:
        pts = np.einsum("eqn,enk->eqk", tab.N, model.element_X)
    else:
        pts = surface_points(tab, state.x)
    return pts, p + 1, out


def write_snapshot(model, state: SimState, stream: IO[str], title: str = "chshell") -> None:
    """Legacy-VTK ASCII unstructured grid of lattice-sampled fields."""
    pts, m, vals = snapshot_fields(model, state)
    E, P, _ = pts.shape
    w = stream.write
    w("# vtk DataFile Version 3.0\n")
    w(f"{title} t={state.t:.17g} step={state.step}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
    w(f"POINTS {E * P} double\n")
    np.savetxt(stream, pts.reshape(-1, 3), fmt="%.17g")
    cells = []
    for e in range(E):
        base = e * P
        for j in range(m - 1):
            for i in range(m - 1):
                a = base + j * m + i
                cells.append((a, a + 1, a + m + 1, a + m))
    w(f"CELLS {len(cells)} {5 * len(cells)}\n")
    np.savetxt(stream, np.hstack([np.full((len(cells), 1), 4), np.array(cells)]), fmt="%d")
    w(f"CELL_TYPES {len(cells)}\n")
    np.savetxt(stream, np.full(len(cells), 9), fmt="%d")
    w(f"POINT_DATA {E * P}\n")
    for name in SNAPSHOT_FIELDS:
        w(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
        np.savetxt(stream, vals[name].reshape(-1), fmt="%.17g")


def read_snapshot_field(stream: IO[str], name: str) -> np.ndarray:
    """Read one point-data scalar array back from :func:`write_snapshot` output."""
    lines = stream.read().splitlines()
    n = int(next(l for l in lines if l.startswith("POINT_DATA")).split()[1])
    start = lines.index(f"SCALARS {name} double 1") + 2
    return np.array([float(v) for v in lines[start:start + n]])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_STATE_ARRAYS = ("x", "v", "a", "phi", "phid", "hist_d", "hist_p")


def save_checkpoint(state: SimState, path: str, run: RunConfig | None = None,
                    extra: dict | None = None) -> None:
    """Write ``<path>.npz`` (arrays, bit exact) and ``<path>.json`` (scalars, config)."""
    arrays = {k: getattr(state, k) for k in _STATE_ARRAYS}
    arrays["scalars"] = np.array([state.t, state.dt])
    np.savez(path + ".npz", **arrays)
    meta = {"step": state.step, "t": float.hex(state.t), "dt": float.hex(state.dt),
            "config": run.source if run else None,
            "overrides": list(run.overrides) if run else [], **(extra or {})}
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)


def load_checkpoint(path: str) -> tuple[SimState, dict]:
    base, ext = os.path.splitext(path)
    if ext not in (".npz", ".json"):
        base = path
    with open(base + ".json", encoding="utf-8") as fh:
        meta = json.load(fh)
    with np.load(base + ".npz") as data:
        arrays = {k: data[k].copy() for k in _STATE_ARRAYS}
        t, dt = data["scalars"]
    if float.fromhex(meta["t"]) != t or float.fromhex(meta["dt"]) != dt:
        raise ValueError("checkpoint scalar data is inconsistent")
    return SimState(float(t), float(dt), step=int(meta["step"]), **arrays), meta


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    state: SimState
    rows: list[TimeSeriesRow] = field(default_factory=list)
    reason: str = "t_end"


def is_steady(state: SimState, tol: float) -> bool:
    return bool(np.linalg.norm(state.v) < tol and np.linalg.norm(state.phid) < tol)


def simulate(scenario: Scenario, state: SimState | None = None, max_steps: int | None = None,
             steady_tol: float | None = None, t_end: float | None = None,
             on_step: Callable[[SimState, TimeSeriesRow], None] | None = None,
             model=None) -> RunResult:
    """Advance until ``t_end``, steady state or accepted step number ``max_steps``.

    Raises :class:`~chshell.integrator.SimulationAbort` on numerical failure.
    """
    model = model or scenario.model()
    ga = GeneralizedAlpha(model, scenario.integrator)
    if state is None:
        state = ga.initial_state(scenario.X, scenario.phi0)
    t_end = scenario.t_end if t_end is None else t_end
    result = RunResult(state)
    while True:
        if state.t >= t_end:
            result.reason = "t_end"
            break
        if max_steps is not None and state.step >= max_steps:
            result.reason = "max_steps"
            break
        state, report = ga.advance(state)
        energies, mass = ga.diagnostics(state)
        row = TimeSeriesRow.from_report(report, energies, mass)
        result.rows.append(row)
        result.state = state
        log.debug("step %d t=%.6g dt=%.3e newton=%d", row.step, row.t, row.dt, row.newton_iters)
        if on_step is not None:
            on_step(state, row)
        if steady_tol is not None and state.step > 1 and is_steady(state, steady_tol):
            result.reason = "steady"
            break
    return result


def run(rc: RunConfig, scenario: Scenario, resume: str | None = None,
        stdout: IO[str] | None = None) -> RunResult:
    """Run with file output into ``rc.out_dir`` (``series.csv``, snapshots, checkpoints)."""
    os.makedirs(rc.out_dir, exist_ok=True)
    model = scenario.model()
    series = os.path.join(rc.out_dir, "series.csv")
    state = None
    if resume:
        state, _ = load_checkpoint(resume)
        _truncate_series(series, state.step)
        fh = open(series, "a", encoding="utf-8", newline="")
    else:
        fh = open(series, "w", encoding="utf-8", newline="")
        write_timeseries([], fh)
    next_snap = [None]

    def snap(st: SimState):
        name = os.path.join(rc.out_dir, f"snapshot_{st.step:06d}.vtk")
        with open(name, "w", encoding="utf-8") as out:
            write_snapshot(model, st, out)

    if rc.snapshot_dt:
        t0 = state.t if state is not None else 0.0
        next_snap[0] = (math.floor(t0 / rc.snapshot_dt) + 1) * rc.snapshot_dt

    def on_step(st: SimState, row: TimeSeriesRow):
        write_timeseries([row], fh, header=False)
        fh.flush()
        if rc.snapshot_every and st.step % rc.snapshot_every == 0:
            snap(st)
        elif rc.snapshot_dt and st.t >= next_snap[0]:
            snap(st)
            next_snap[0] = (math.floor(st.t / rc.snapshot_dt) + 1) * rc.snapshot_dt
        if rc.checkpoint_every and st.step % rc.checkpoint_every == 0:
            save_checkpoint(st, os.path.join(rc.out_dir, f"checkpoint_{st.step:06d}"), rc)

    try:
        if state is None and (rc.snapshot_every or rc.snapshot_dt):
            ga = GeneralizedAlpha(model, scenario.integrator)
            state = ga.initial_state(scenario.X, scenario.phi0)
            snap(state)
        result = simulate(scenario, state, rc.get("time.max_steps"), rc.get("time.steady_tol"),
                          on_step=on_step, model=model)
    finally:
        fh.close()
    save_checkpoint(result.state, os.path.join(rc.out_dir, "checkpoint_final"), rc,
                    {"reason": result.reason})
    if stdout is not None:
        st = result.state
        last = result.rows[-1] if result.rows else None
        stdout.write(f"finished ({result.reason}): step {st.step}, t = {st.t:.6g}")
        if last is not None:
            stdout.write(f", psi = {last.psi_total:.10g}, mass = {last.mass:.12g}")
        stdout.write("\n")
    return result


def _truncate_series(path: str, step: int) -> None:
    """Drop rows after ``step`` so a resumed run appends seamlessly."""
    if not os.path.exists(path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            write_timeseries([], fh)
        return
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    keep = [lines[0]] + [l for l in lines[1:] if l and int(l.split(",", 1)[0]) <= step]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(keep) + "\n")
