"""Run configurations, design scenarios, diagnostics and CSV output."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from .elastic_solver import TimeConfig, check_cfl, solve_dual
from .errors import ConfigError, NumericalError, SeisOEDError
from .grid_medium import LayerSpec, build_grid
from .hessian import (NoiseModel, misfit_hessian_H1, misfit_hessian_H2, patch_dofs,
                      scale_hessian, write_matrix_csv)
from .inference import (EigEstimate, UniformPrior, dkl_hat, dkl_hat_batch, dkl_second_order, nested_mc_eig,
                        per_parameter_gain)
from .integrate import (SampleStream, convergence_rate, expectation_mc, expectation_quadrature,
                        relative_errors, smolyak_total_degree, stream_generator)
from .model import GreensForwardModel, SeismicModel, quiet_start, reduced_model
from .source import N_THETA, PARAM_NAMES

log = logging.getLogger(__name__)

PRIOR_LOW = (-1000.0, -3000.0, 0.5, 3.0, 1e13, 1e13, 1e13)
PRIOR_HIGH = (1000.0, -1000.0, 1.5, 5.0, 1e15, 1e15, 1e15)
PRIOR_MEAN_THETA = (0.0, -2000.0, 1.0, 4.0, 1e14, 1e14, 1e14)

# --------------------------------------------------------------------------
# configuration


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _strs(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_str(text):
    text = text.strip()
    return None if text.lower() in ("", "none") else text


# key -> (parser, default); a default of ``...`` marks a required key
SCHEMA = {
    "x1_min": (float, -10000.0),
    "x1_max": (float, 10000.0),
    "x2_min": (float, -15000.0),
    "x2_max": (float, 0.0),
    "h": (float, ...),
    "dt": (float, ...),
    "T": (float, ...),
    "cfl": (float, 0.9),
    "layer_bottoms": (_floats, None),
    "density": (_floats, (2600.0, 2700.0)),
    "cp": (_floats, (4000.0, 6000.0)),
    "cs": (_floats, (2000.0, 3464.0)),
    "prior_low": (_floats, PRIOR_LOW),
    "prior_high": (_floats, PRIOR_HIGH),
    "theta": (_floats, PRIOR_MEAN_THETA),
    "free_params": (_strs, PARAM_NAMES),
    "noise_var": (float, 1e-4),
    "noise_cov": (_floats, None),
    "receivers": (_floats, None),
    "scenario": (str, None),
    "sweep_nr": (_ints, None),
    "sweep_dr": (_floats, None),
    "interval": (_floats, (-8000.0, 8000.0)),
    "estimator": (str, "laplace"),
    "integrator": (str, "mc"),
    "mc_samples": (int, 500),
    "sparse_level": (int, 3),
    "nested_outer": (int, 100),
    "nested_inner": (int, 1000),
    "nested_marginalize": (_opt_str, None),
    "nested_reuse": (_bool, False),
    "diagnostic": (str, None),
    "convergence_mc_sizes": (_ints, (100, 1000, 10000)),
    "convergence_replicates": (int, 10),
    "convergence_levels": (_ints, (1, 2, 3, 4, 5, 6)),
    "convergence_reference_level": (int, 18),
    "seed": (int, 0),
    "workers": (int, 1),
    "output": (str, "results"),
}

ESTIMATORS = ("laplace", "laplace2", "nested")
INTEGRATORS = ("mc", "sparse")
SCENARIOS = ("I", "II", "III")
DIAGNOSTICS = ("condition", "convergence", "comparison")
EXECUTION_KEYS = ("output", "workers")


@dataclass(frozen=True)
class RunConfig:
    values: dict
    lines: dict = field(default_factory=dict, compare=False, repr=False)

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def replace(self, **changes) -> "RunConfig":
        vals = dict(self.values)
        vals.update(changes)
        return validate_config(vals, self.lines)

    @property
    def extents(self):
        return (self.x1_min, self.x1_max, self.x2_min, self.x2_max)

    @property
    def free(self) -> list[int]:
        return [_param_index(p) for p in self.free_params]

    @property
    def prior_full(self) -> UniformPrior:
        return UniformPrior(self.prior_low, self.prior_high)

    @property
    def prior(self) -> UniformPrior:
        """Prior restricted to the free parameters."""
        f = self.free
        return UniformPrior(np.array(self.prior_low)[f], np.array(self.prior_high)[f])

    @property
    def noise(self) -> NoiseModel:
        if self.noise_cov is not None:
            return NoiseModel(np.array(self.noise_cov).reshape(2, 2))
        return NoiseModel.isotropic(self.noise_var)

    @property
    def layers(self) -> LayerSpec:
        bottoms = self.layer_bottoms or (-1000.0, self.x2_min)
        return LayerSpec.from_bottoms(self.x2_max, bottoms, self.density, self.cp, self.cs)

    @property
    def N_t(self) -> int:
        return 1 + round(self.T / self.dt)

    def canonical(self) -> str:
        """Resolved configuration, one ``key = value`` per line, sorted.

        Execution-only keys (output directory, worker count) do not change
        results and are left out.
        """
        out = []
        for key in sorted(self.values):
            if key in EXECUTION_KEYS:
                continue
            v = self.values[key]
            if isinstance(v, tuple):
                v = ",".join(_fmt(x) for x in v)
            elif isinstance(v, float):
                v = _fmt(v)
            out.append(f"{key} = {v}")
        return "\n".join(out)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def _fmt(x):
    if isinstance(x, float):
        return f"{x:.17g}"
    return str(x)


def _param_index(p) -> int:
    if isinstance(p, int) or str(p).isdigit():
        i = int(p)
        if not 0 <= i < N_THETA:
            raise ConfigError(f"parameter index {i} out of range")
        return i
    if p not in PARAM_NAMES:
        raise ConfigError(f"unknown parameter name {p!r}; expected one of {PARAM_NAMES}")
    return PARAM_NAMES.index(p)


def parse_config(text: str) -> RunConfig:
    """Parse flat ``key = value`` text (``#`` comments, comma-separated lists)."""
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        try:
            values[key] = SCHEMA[key][0](val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for '{key}': {exc}") from None
        lines[key] = lineno
    for key, (_, default) in SCHEMA.items():
        if key not in values:
            if default is ...:
                raise ConfigError(f"missing required key '{key}'")
            values[key] = default
    return validate_config(values, lines)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def _where(lines, key):
    return f"line {lines[key]}: " if key in lines else ""


def validate_config(values: dict, lines: dict | None = None) -> RunConfig:
    """Check physical consistency; grid, CFL and receiver fit are verified here."""
    lines = lines or {}

    def fail(key, msg):
        raise ConfigError(f"{_where(lines, key)}{msg}")

    for key in ("prior_low", "prior_high", "theta"):
        if len(values[key]) != N_THETA:
            fail(key, f"'{key}' needs {N_THETA} values")
    if any(hi <= lo for lo, hi in zip(values["prior_low"], values["prior_high"])):
        fail("prior_high", "prior_high must exceed prior_low componentwise")
    for key, allowed in (("estimator", ESTIMATORS), ("integrator", INTEGRATORS)):
        if values[key] not in allowed:
            fail(key, f"'{key}' must be one of {allowed}")
    if values["scenario"] is not None and values["scenario"] not in SCENARIOS:
        fail("scenario", f"'scenario' must be one of {SCENARIOS}")
    if values["diagnostic"] is not None and values["diagnostic"] not in DIAGNOSTICS:
        fail("diagnostic", f"'diagnostic' must be one of {DIAGNOSTICS}")
    for key in ("mc_samples", "nested_outer", "nested_inner", "workers"):
        if values[key] < 1:
            fail(key, f"'{key}' must be positive")
    if values["noise_var"] <= 0:
        fail("noise_var", "noise_var must be positive")
    if values["noise_cov"] is not None and len(values["noise_cov"]) != 4:
        fail("noise_cov", "noise_cov needs 4 values (row-major 2x2)")
    try:
        free = [_param_index(p) for p in values["free_params"]]
    except ConfigError as exc:
        fail("free_params", str(exc))
    if len(set(free)) != len(free):
        fail("free_params", "free_params contains duplicates")
    if values["nested_marginalize"] is not None:
        try:
            marg = _param_index(values["nested_marginalize"])
        except ConfigError as exc:
            fail("nested_marginalize", str(exc))
        if marg not in free:
            fail("nested_marginalize", "nested_marginalize must be a free parameter")
    n_layers = len(values["layer_bottoms"] or (0, 0))
    for key in ("density", "cp", "cs"):
        if len(values[key]) != n_layers:
            fail(key, f"'{key}' needs one value per layer ({n_layers})")
    cfg = RunConfig(values, lines)
    for key, check in (("h", lambda: build_grid(cfg.extents, values["h"])),
                       ("layer_bottoms", lambda: cfg.layers),
                       ("noise_cov", lambda: cfg.noise),
                       ("dt", lambda: TimeConfig(values["dt"], values["T"]))):
        try:
            check()
        except (SeisOEDError, np.linalg.LinAlgError) as exc:
            fail(key, str(exc))
    grid = build_grid(cfg.extents, values["h"])
    tol = 1e-9 * grid.h
    for x in values["receivers"] or ():
        if not grid.x1_min - tol <= x <= grid.x1_max + tol:
            fail("receivers", f"receiver x1={x} lies outside the grid")
    lo, hi = values["interval"]
    if lo < grid.x1_min - tol or hi > grid.x1_max + tol:
        fail("interval", "receiver interval exceeds the grid")
    # source box must keep 3h from the boundary
    box_lo = [values["prior_low"][i] if i in free else values["theta"][i] for i in (0, 1)]
    box_hi = [values["prior_high"][i] if i in free else values["theta"][i] for i in (0, 1)]
    margin = 3 * grid.h
    if (box_lo[0] - margin < grid.x1_min - tol or box_hi[0] + margin > grid.x1_max + tol
            or box_lo[1] - margin < grid.x2_min - tol or box_hi[1] + margin > grid.x2_max + tol):
        fail("prior_low", f"source positions must stay {margin:g} m (3h) inside the grid")
    cfg = RunConfig(values, lines)
    try:
        check_cfl(_physical_model(cfg).ops, TimeConfig(values["dt"], values["T"]), values["cfl"])
    except ConfigError as exc:
        fail("dt", str(exc))
    return cfg


@lru_cache(maxsize=4)
def _cached_model(extents, h, layers, dt, T) -> SeismicModel:
    return SeismicModel.build(extents, h, layers, dt, T, cfl=math.inf)


def _physical_model(cfg: RunConfig) -> SeismicModel:
    """Forward model for the configuration's grid, medium and time window (cached)."""
    return _cached_model(cfg.extents, cfg.h, cfg.layers, cfg.dt, cfg.T)


def check_config_cfl(cfg: RunConfig, model: SeismicModel | None = None) -> SeismicModel:
    """Forward model for ``cfg``, rejecting CFL violations before any solve."""
    model = _physical_model(cfg) if model is None else model
    check_cfl(model.ops, model.time, cfg.cfl)
    return model


# --------------------------------------------------------------------------
# designs


@dataclass(frozen=True)
class DesignSpec:
    """``N_R`` surface receivers with spacing ``d_R``, centred on ``x1 = 0``."""

    N_R: int
    d_R: float

    def __post_init__(self):
        if self.N_R < 1:
            raise ConfigError("a design needs at least one receiver")

    @property
    def positions(self) -> np.ndarray:
        return (np.arange(self.N_R) - 0.5 * (self.N_R - 1)) * self.d_R

    @property
    def key(self) -> tuple:
        return (self.N_R, _fmt(float(self.d_R)))


@dataclass(frozen=True)
class ReceiverLayout:
    """Arbitrary surface receiver positions, for single-design runs."""

    x1: tuple

    @property
    def positions(self) -> np.ndarray:
        return np.array(self.x1, dtype=float)

    @property
    def N_R(self) -> int:
        return len(self.x1)


def scenario_designs(cfg: RunConfig, scenario: str | None = None) -> list[DesignSpec]:
    scenario = scenario or cfg.scenario
    if scenario is None:
        raise ConfigError("no scenario selected")
    lo, hi = cfg.interval
    if scenario == "I":
        counts = cfg.sweep_nr or (3, 5, 9, 17, 41, 81)
        return [DesignSpec(n, (hi - lo) / (n - 1)) for n in counts]
    if scenario == "II":
        counts = cfg.sweep_nr or tuple(range(1, 20, 2))
        d = cfg.sweep_dr[0] if cfg.sweep_dr else 1000.0
        return [DesignSpec(n, d) for n in counts]
    if scenario == "III":
        n = cfg.sweep_nr[0] if cfg.sweep_nr else 5
        spacings = cfg.sweep_dr or tuple(200.0 * k for k in range(1, 21))
        return [DesignSpec(n, d) for d in spacings]
    raise ConfigError(f"unknown scenario {scenario!r}")


def design_from_receivers(cfg: RunConfig):
    if not cfg.receivers:
        raise ConfigError("this command needs the 'receivers' key")
    return np.array(cfg.receivers, dtype=float)


def single_design_eig(cfg: RunConfig, model=None) -> EigEstimate:
    """Information gain of the design given by the ``receivers`` key."""
    layout = ReceiverLayout(tuple(design_from_receivers(cfg)))
    if cfg.estimator == "nested":
        return nested_eig(cfg, layout.positions, model)
    res = laplace_eig(cfg, [layout], model)[0]
    if res.estimate is None:
        raise NumericalError(res.error)
    return res.estimate


# --------------------------------------------------------------------------
# Laplace evaluation engine


def _outer_points(cfg: RunConfig):
    """Prior points and weights for the outer integral over the free parameters."""
    prior = cfg.prior
    if cfg.integrator == "sparse":
        rule = smolyak_total_degree(prior.dim, cfg.sparse_level)
        pts = prior.from_cube(rule.points)
        return pts, rule.weights / 2.0**prior.dim, "sparse"
    pts = SampleStream(cfg.seed, prior.low, prior.high, stream=0).draw(0, cfg.mc_samples)
    return pts, np.full(len(pts), 1.0 / len(pts)), "mc"


def _full_theta(cfg: RunConfig, sub) -> np.ndarray:
    theta = np.array(cfg.theta, dtype=float)
    theta[cfg.free] = sub
    return theta


_WORKER_CONTEXT: dict = {}


def _init_worker(ctx):
    _WORKER_CONTEXT.clear()
    _WORKER_CONTEXT.update(ctx)


def _map_points(fn, points, workers: int, ctx: dict):
    """Evaluate ``fn(ctx, index, point)`` for all points, preserving order."""
    if workers <= 1 or len(points) < 2:
        return [fn(ctx, i, p) for i, p in enumerate(points)]
    chunks = np.array_split(np.arange(len(points)), min(workers * 4, len(points)))
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(ctx,)) as pool:
        futures = [pool.submit(_run_chunk, fn, [(int(i), points[i]) for i in c]) for c in chunks]
        out = []
        for fut in futures:
            out.extend(fut.result())
    return out


def _run_chunk(fn, items):
    return [fn(_WORKER_CONTEXT, i, p) for i, p in items]


def _laplace_point(ctx, index, sub):
    """D-hat (and per-parameter gains) for every design at one prior point."""
    cfg, model, designs = ctx["cfg"], ctx["model"], ctx["designs"]
    union_rec, slots = ctx["union"], ctx["slots"]
    theta = _full_theta(cfg, sub)
    noise = cfg.noise
    free = cfg.free
    prior = cfg.prior
    with quiet_start():
        sens = model.sensitivities(theta, union_rec, free)            # (k, R, 2, N_t)
    w = noise.whiten(sens)
    per_node = np.einsum("arct,brct->rab", w, w)                    # (R, k, k)
    out_eig, out_q = [], []
    for d, design in enumerate(designs):
        H1 = per_node[slots[d]].sum(axis=0)
        H1 = 0.5 * (H1 + H1.T)
        try:
            if cfg.estimator == "laplace2":
                H2 = _h2_for_design(cfg, model, theta, design, index, d)
                out_eig.append(dkl_second_order(H1 + H2, prior, sub))
            else:
                out_eig.append(dkl_hat(H1, prior, sub))
            out_q.append(per_parameter_gain(H1, prior) if ctx.get("per_param") else None)
        except NumericalError as exc:
            log.warning("design %s at sample %d: %s", design, index, exc)
            out_eig.append(math.nan)
            out_q.append(None)
    return out_eig, out_q


def _h2_for_design(cfg, model, theta, design, index, d):
    """Dual-weighted Hessian term for one synthetic noisy data set."""
    rec = model.surface(design.positions)
    rng = stream_generator(cfg.seed, 5, index, d)
    eps = cfg.noise.sample(rng, (rec.N_R, cfg.N_t))                 # (R, 2, N_t)
    cinv = np.linalg.inv(cfg.noise.cov)
    grad_u = -np.einsum("ij,rjt->tri", cinv, eps).reshape(cfg.N_t, -1)
    idx = patch_dofs(theta, model.ops)
    phi = solve_dual(model.ops, rec.dof(model.grid.N_h), grad_u, model.time, store=idx)[:, :, 0]
    H2 = misfit_hessian_H2(phi, theta, model.ops, model.time)
    return H2[np.ix_(cfg.free, cfg.free)]


@dataclass
class DesignResult:
    design: DesignSpec
    estimate: EigEstimate | None
    per_param: np.ndarray | None = None
    error: str | None = None
    seconds: float = 0.0


def _laplace_context(cfg, model, designs, per_param):
    union = sorted({float(x) for d in designs for x in d.positions})
    union_rec = model.surface(union)
    # receivers that snap to the same node are kept distinct per design
    pos_index = {x: i for i, x in enumerate(union)}
    slots = [np.array([pos_index[float(x)] for x in d.positions]) for d in designs]
    return {"cfg": cfg, "model": model, "designs": designs, "union": union_rec,
            "slots": slots, "per_param": per_param}


def laplace_eig(cfg: RunConfig, designs, model: SeismicModel | None = None,
                per_param: bool = False) -> list[DesignResult]:
    """Prior-averaged Laplace information gain for each design.

    All designs share the same outer prior points, so differences between
    designs are not polluted by independent sampling noise.
    """
    model = check_config_cfl(cfg, model)
    points, weights, tag = _outer_points(cfg)
    ctx = _laplace_context(cfg, model, designs, per_param)
    t0 = time.perf_counter()
    rows = _map_points(_laplace_point, points, cfg.workers, ctx)
    elapsed = time.perf_counter() - t0
    values = np.array([r[0] for r in rows])                          # (n, designs)
    estimator = "laplace-T3" if cfg.estimator == "laplace2" else "laplace-T4"
    results = []
    for d, design in enumerate(designs):
        v = values[:, d]
        if not np.all(np.isfinite(v)):
            bad = int(np.flatnonzero(~np.isfinite(v))[0])
            results.append(DesignResult(design, None, error=f"estimator failed at outer point {bad}",
                                        seconds=elapsed / len(designs)))
            continue
        est = float(np.sum(weights * v))
        if tag == "mc":
            se = float(np.std(v, ddof=1) / math.sqrt(len(v))) if len(v) > 1 else math.inf
        else:
            se = math.nan
        q = None
        if per_param:
            q = np.sum(weights[:, None] * np.array([r[1][d] for r in rows]), axis=0)
        results.append(DesignResult(design, EigEstimate(est, se, estimator, len(v)), q,
                                    seconds=elapsed / len(designs)))
    return results


def nested_eig(cfg: RunConfig, positions, model: SeismicModel | None = None) -> EigEstimate:
    """Nested Monte Carlo information gain for receivers at ``positions``."""
    model = check_config_cfl(cfg, model)
    forward = greens_model(cfg, model, positions)
    sub_model = reduced_model(forward, cfg.free, cfg.theta)
    linear = None
    if cfg.nested_marginalize is not None:
        linear = cfg.free.index(_param_index(cfg.nested_marginalize))
    return nested_mc_eig(sub_model, cfg.prior, cfg.noise, cfg.nested_outer, cfg.nested_inner,
                         cfg.seed, reuse_inner=cfg.nested_reuse, linear_param=linear)


def greens_model(cfg: RunConfig, model: SeismicModel, positions) -> GreensForwardModel:
    rec = model.surface(positions)
    box = []
    for i in (0, 1):
        if i in cfg.free:
            box.append((cfg.prior_low[i], cfg.prior_high[i]))
        else:
            box.append((cfg.theta[i], cfg.theta[i]))
    return GreensForwardModel(model.ops, model.time, rec, box[0], box[1])


def evaluate_designs(cfg: RunConfig, designs, model=None, per_param=False):
    """Evaluate every design with the configured estimator; failures are logged."""
    if cfg.estimator != "nested":
        try:
            return laplace_eig(cfg, designs, model, per_param)
        except NumericalError as exc:
            log.error("Laplace evaluation failed: %s", exc)
            return [DesignResult(d, None, error=str(exc)) for d in designs]
    model = check_config_cfl(cfg, model)
    out = []
    for design in designs:
        t0 = time.perf_counter()
        try:
            est = nested_eig(cfg, design.positions, model)
            out.append(DesignResult(design, est, seconds=time.perf_counter() - t0))
        except SeisOEDError as exc:
            log.error("design %s failed: %s", design, exc)
            out.append(DesignResult(design, None, error=str(exc),
                                    seconds=time.perf_counter() - t0))
    return out


# --------------------------------------------------------------------------
# CSV output with provenance


def provenance(cfg: RunConfig, command: str) -> list[str]:
    return [f"seisoed {__version__}", f"command={command}", f"config_sha256={cfg.digest()}",
            f"seed={cfg.seed}"] + [f"config {line}" for line in cfg.canonical().splitlines()]


def _write_csv(path: Path, header_lines, columns, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerows(rows)
    os.replace(tmp, path)


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def read_csv_rows(path):
    """Header lines and data rows (as string lists) of a results CSV."""
    header, rows, columns = [], [], None
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("# "):
                header.append(line[2:].rstrip("\n"))
            elif columns is None:
                columns = next(csv.reader([line]))
            else:
                rows.append(next(csv.reader([line])))
    return header, columns, rows


SWEEP_COLUMNS = ["scenario", "N_R", "d_R", "estimator", "eig", "stderr", "n_samples",
                 "level", "status"]


def _sweep_row(scenario, cfg, res: DesignResult):
    est = res.estimate
    level = cfg.sparse_level if cfg.integrator == "sparse" and cfg.estimator != "nested" else ""
    if est is None:
        return [scenario, res.design.N_R, _cell(float(res.design.d_R)), cfg.estimator,
                "", "", "", level, f"failed: {res.error}"]
    return [scenario, res.design.N_R, _cell(float(res.design.d_R)), est.estimator,
            _cell(est.value), _cell(est.stderr), est.n_samples, level, "ok"]


def _completed(path: Path, cfg: RunConfig, key_cols=(1, 2)):
    """Rows of a previous run with the same configuration, keyed by design."""
    if not path.exists():
        return {}
    try:
        header, _, rows = read_csv_rows(path)
    except (OSError, StopIteration):
        return {}
    if f"config_sha256={cfg.digest()}" not in header:
        return {}
    return {tuple(r[i] for i in key_cols): r for r in rows if r and r[-1] == "ok"}


def _design_key(design: DesignSpec):
    return (str(design.N_R), _cell(float(design.d_R)))


def run_scenario(cfg: RunConfig, out_dir=None, scenario: str | None = None):
    """Sweep a scenario's designs; writes ``sweep_<scenario>.csv`` and returns its rows.

    Completed design points of an earlier run with the same configuration
    are reused, so interrupted sweeps can be resumed.
    """
    scenario = scenario or cfg.scenario
    designs = scenario_designs(cfg, scenario)
    out_dir = Path(out_dir or cfg.output)
    path = out_dir / f"sweep_{scenario}.csv"
    done = _completed(path, cfg)
    todo = [d for d in designs if _design_key(d) not in done]
    results = {}
    if todo:
        for res in evaluate_designs(cfg, todo):
            results[_design_key(res.design)] = res
    rows, timing = [], []
    for d in designs:
        key = _design_key(d)
        if key in done:
            rows.append(done[key])
        else:
            rows.append(_sweep_row(scenario, cfg, results[key]))
            timing.append([key[0], key[1], f"{results[key].seconds:.3f}"])
    _write_csv(path, provenance(cfg, f"sweep {scenario}"), SWEEP_COLUMNS, rows)
    _append_timing(path, timing)
    return rows


def _append_timing(path: Path, rows):
    tpath = path.with_suffix(".timing.csv")
    new = not tpath.exists()
    with open(tpath, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["N_R", "d_R", "wall_seconds"])
        w.writerows(rows)


def per_parameter_sweep(cfg: RunConfig, out_dir=None):
    """Per-parameter gains against receiver spacing (Scenario III designs)."""
    designs = scenario_designs(cfg, "III")
    lap_cfg = cfg if cfg.estimator != "nested" else cfg.replace(estimator="laplace")
    results = laplace_eig(lap_cfg, designs, per_param=True)
    names = [PARAM_NAMES[i] for i in cfg.free]
    rows = []
    for res in results:
        q = res.per_param if res.per_param is not None else [None] * len(names)
        rows.append([res.design.N_R, _cell(float(res.design.d_R))] + [_cell(v) for v in q]
                    + ["ok" if res.estimate is not None else f"failed: {res.error}"])
    path = Path(out_dir or cfg.output) / "per_param.csv"
    _write_csv(path, provenance(cfg, "per-param"), ["N_R", "d_R"] + [f"Q_{n}" for n in names]
               + ["status"], rows)
    return rows


# --------------------------------------------------------------------------
# diagnostics


def condition_study(cfg: RunConfig, model=None, theta=None):
    """Gauss-Newton Hessian conditioning before and after diagonal rescaling."""
    model = check_config_cfl(cfg, model)
    positions = design_from_receivers(cfg)
    theta = np.array(cfg.theta if theta is None else theta, dtype=float)
    with quiet_start():
        sens = model.sensitivities(theta, model.surface(positions), cfg.free)
    return scale_hessian(misfit_hessian_H1(sens, cfg.noise))


def laplace_integrand(cfg: RunConfig, model=None, positions=None):
    """Vectorised ``theta_free -> D-hat`` built on the Green's function model."""
    model = check_config_cfl(cfg, model)
    positions = design_from_receivers(cfg) if positions is None else positions
    forward = greens_model(cfg, model, positions)
    prior, noise, free = cfg.prior, cfg.noise, cfg.free
    base = np.array(cfg.theta, dtype=float)

    def f(subs, chunk=2048):
        subs = np.atleast_2d(subs)
        out = np.empty(len(subs))
        for s in range(0, len(subs), chunk):
            block = subs[s:s + chunk]
            thetas = np.repeat(base[None, :], len(block), axis=0)
            thetas[:, free] = block
            J = noise.whiten(forward.jacobian(thetas, free)).reshape(len(block), len(free), -1)
            H = np.einsum("nai,nbi->nab", J, J)
            out[s:s + len(block)] = dkl_hat_batch(H, prior, block)
        return out

    return f


@dataclass
class ConvergenceReport:
    mc_sizes: list
    mc_errors: list
    mc_rate: float
    sparse_sizes: list
    sparse_estimates: list
    sparse_errors: list
    sparse_rate: float
    reference: float


def convergence_study(cfg: RunConfig, model=None, out_dir=None) -> ConvergenceReport:
    """Monte Carlo and sparse-quadrature convergence of the Laplace integral."""
    f = laplace_integrand(cfg, model)
    prior = cfg.prior
    box = (prior.low, prior.high)
    ref_rule = smolyak_total_degree(prior.dim, cfg.convergence_reference_level)
    reference = expectation_quadrature(f, ref_rule, box)
    mc_err, mc_mean = [], []
    for k, M in enumerate(cfg.convergence_mc_sizes):
        # independent streams per (size, replicate); RMS relative error
        ests = np.array([expectation_mc(f, box, M, cfg.seed, stream=1000 * (k + 1) + rep)[0]
                         for rep in range(cfg.convergence_replicates)])
        mc_mean.append(float(np.mean(ests)))
        mc_err.append(float(np.sqrt(np.mean((ests - reference) ** 2)) / abs(reference)))
    mc_rate = convergence_rate(mc_err, cfg.convergence_mc_sizes)
    sizes, ests = [], []
    for level in cfg.convergence_levels:
        rule = smolyak_total_degree(prior.dim, level)
        sizes.append(rule.size)
        ests.append(expectation_quadrature(f, rule, box))
    rel = relative_errors(ests)
    try:
        sparse_rate = convergence_rate(rel, sizes[:-1])
    except SeisOEDError:
        sparse_rate = math.nan
    out = Path(out_dir or cfg.output)
    header = provenance(cfg, "diagnose convergence") + [f"reference={reference:.17g}"]
    _write_csv(out / "convergence_mc.csv", header + [f"rate={mc_rate:.17g}"],
               ["size", "estimate", "rel_error"],
               [[M, _cell(e), _cell(r)] for M, e, r in
                zip(cfg.convergence_mc_sizes, mc_mean, mc_err)])
    _write_csv(out / "convergence_sparse.csv", header + [f"rate={sparse_rate:.17g}"],
               ["size", "estimate", "rel_error"],
               [[n, _cell(e), _cell(r) if r is not None else ""]
                for n, e, r in zip(sizes, ests, list(rel) + [None])])
    return ConvergenceReport(list(cfg.convergence_mc_sizes), mc_err, mc_rate, sizes, ests,
                             list(rel), sparse_rate, reference)


@dataclass
class ComparisonReport:
    laplace: float
    laplace_stderr: float
    nested: EigEstimate
    rel_gap: float


def comparison_study(cfg: RunConfig, model=None, out_dir=None) -> ComparisonReport:
    """Laplace against nested Monte Carlo, on the nested estimator's outer samples."""
    model = check_config_cfl(cfg, model)
    positions = design_from_receivers(cfg)
    nested = nested_eig(cfg, positions, model)
    f = laplace_integrand(cfg, model, positions)
    vals = f(nested.outer_samples)
    lap = float(np.mean(vals))
    lap_se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else math.inf
    gap = abs(lap - nested.value) / abs(nested.value)
    path = Path(out_dir or cfg.output) / "comparison.csv"
    rows = [["laplace", _cell(lap), _cell(lap_se), len(vals), "", ""],
            ["nested", _cell(nested.value), _cell(nested.stderr), nested.n_samples,
             nested.M_outer, nested.M_inner]]
    _write_csv(path, provenance(cfg, "diagnose comparison") + [f"rel_gap={gap:.17g}"],
               ["estimator", "eig", "stderr", "n_samples", "M_outer", "M_inner"], rows)
    return ComparisonReport(lap, lap_se, nested, gap)


def write_condition_report(cfg: RunConfig, res, out_dir=None):
    out = Path(out_dir or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "condition.csv", provenance(cfg, "diagnose condition"),
               ["cond_unscaled", "cond_scaled"], [[_cell(res.cond_unscaled), _cell(res.cond_scaled)]])
    write_matrix_csv(out / "H1.csv", res.H_I)
    write_matrix_csv(out / "H1_scaled.csv", res.H_scaled)


def run_diagnostics(cfg: RunConfig, out_dir=None):
    if cfg.diagnostic is None:
        raise ConfigError("the diagnose command needs the 'diagnostic' key")
    if cfg.diagnostic == "condition":
        res = condition_study(cfg)
        write_condition_report(cfg, res, out_dir)
        return res
    if cfg.diagnostic == "convergence":
        return convergence_study(cfg, out_dir=out_dir)
    return comparison_study(cfg, out_dir=out_dir)
