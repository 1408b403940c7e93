"""Config-driven pipeline: model -> state -> propagator -> grid -> reports -> artifacts.

A run writes ``grid.csv``, ``decay_report.json``, ``decay.svg`` and
``manifest.json`` into its output directory.  Every hard assertion in the
manifest is one of the invariants checked by the library modules; a failed
assertion gives exit status 2, an invalid config status 1.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import itertools
import json
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
import scipy

from . import __version__
from .correlators import (
    BOUND_TOL,
    EPS_FRACTION,
    CorrelationGrid,
    SUM_RULE_TOL,
    SUM_RULE_TOL_T0,
    absolute_sum,
    compute_grid,
    decay_report,
    grid_invariants,
    lr_norm_profile_and_fit,
    weighted_sum_rule,
)
from .dynamics import DEFAULT_MARGIN, DEFAULT_T_COUNT, Propagator, default_velocity, lr_horizon, time_grid
from .errors import (
    ConfigError,
    IncompleteGrid,
    InsufficientData,
    SlowDecayError,
    TailTooHeavy,
)
from .models import (
    LatticeSpec,
    ModelSpec,
    assemble_hamiltonian,
    max_coupling,
    total_charge,
    total_current,
)
from .operators import DEFAULT_DIM_CAP, sector_decompose
from .states import (
    INVARIANCE_TOL,
    QuantumState,
    boost_state,
    bond_current_expectations,
    current_tilted_ground_state,
    gibbs_state,
    momentum_eigenstate,
    verify_translation_invariance,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
ENV_WORKERS = "SLOWDECAY_WORKERS"
ENV_DIM_CAP = "SLOWDECAY_DIM_CAP"
ZERO_CURRENT = 1e-12
STATE_TOL = 1e-12
ALGEBRA_TOL = 1e-10
T0_TOL = 1e-12
MAX_SWEEP_POINTS = 64
STATE_KINDS = ("gibbs", "boosted_gibbs", "tilted_ground", "momentum_eigenstate")
SWEEP_AXES = ("L", "lam", "beta", "boost_k", "tilt")

_positive = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["model", "lattice", "state"],
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["family"],
            "properties": {
                "family": {"enum": ["xxz", "tv_fermion"]},
                "lam": {"type": "number"},
                "T": {"type": "number"},
                "V": {"type": "number"},
            },
        },
        "lattice": {
            "type": "object",
            "additionalProperties": False,
            "required": ["sides"],
            "properties": {
                "d": {"type": "integer", "minimum": 1},
                "sides": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 2}},
                "boundary": {
                    "oneOf": [
                        {"enum": ["periodic", "open"]},
                        {"type": "array", "items": {"enum": ["periodic", "open"]}},
                    ]
                },
            },
        },
        "state": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": list(STATE_KINDS)},
                "beta": {"type": "number", "minimum": 0},
                "boost_k": {"type": "integer"},
                "tilt": {"type": "number"},
                "momentum_k": {"type": "integer"},
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "t_count": {"type": "integer", "minimum": 2},
                "z_chart": {"oneOf": [{"const": "full"}, {"type": "integer", "minimum": 1}]},
                "margin": {"type": "integer", "minimum": 0},
                "with_norms": {"type": "boolean"},
                "fit_t_count": {"type": "integer", "minimum": 2},
                "fit_t_max": _positive,
                "fit_radius": {"type": "integer", "minimum": 1},
                "wraparound_count": {"type": "integer", "minimum": 0},
                "v_lr": _positive,
            },
        },
        "tolerances": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sum_rule_tol": _positive,
                "sum_rule_tol_t0": _positive,
                "bound_tol": _positive,
                "invariance_tol": _positive,
                "eps_fraction": _positive,
            },
        },
        "output_dir": {"type": "string", "minLength": 1},
        "seed": {"type": "integer", "minimum": 0},
    },
}

DEFAULTS = {
    "model": {"lam": 1.0, "T": 1.0, "V": 0.0},
    "lattice": {"boundary": "periodic"},
    "state": {"beta": 1.0, "boost_k": 0, "tilt": 0.0, "momentum_k": 1},
    "grid": {
        "t_count": DEFAULT_T_COUNT,
        "z_chart": "full",
        "margin": DEFAULT_MARGIN,
        "with_norms": True,
        "fit_t_count": 7,
        "fit_t_max": None,
        "fit_radius": 4,
        "wraparound_count": 4,
        "v_lr": None,
    },
    "tolerances": {
        "sum_rule_tol": SUM_RULE_TOL,
        "sum_rule_tol_t0": SUM_RULE_TOL_T0,
        "bound_tol": BOUND_TOL,
        "invariance_tol": INVARIANCE_TOL,
        "eps_fraction": EPS_FRACTION,
    },
    "output_dir": "runs/out",
    "seed": 0,
}


# --- configuration -----------------------------------------------------------


def env_dim_cap() -> int:
    value = os.environ.get(ENV_DIM_CAP)
    return int(value) if value else DEFAULT_DIM_CAP


def env_workers(default: int = 1) -> int:
    value = os.environ.get(ENV_WORKERS)
    return max(1, int(value)) if value else default


def _path(error) -> str:
    return ".".join(str(p) for p in error.absolute_path) or "config"


def _describe(error) -> str:
    where = _path(error)
    kind, bound = error.validator, error.validator_value
    if kind == "minimum":
        return f"{where} must be ≥ {bound}"
    if kind == "exclusiveMinimum":
        return f"{where} must be > {bound}"
    if kind == "enum":
        return f"{where} must be one of {', '.join(map(str, bound))}"
    if kind == "type":
        return f"{where} must be of type {bound}"
    if kind == "required":
        missing = [p for p in bound if p not in error.instance]
        prefix = "" if where == "config" else where + "."
        return "; ".join(f"{prefix}{p} is required" for p in missing)
    return f"{where}: {error.message}"


def _merge(defaults: dict, data: dict) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in data.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _horizon_length(sides, boundary) -> int:
    periodic = [s for s, b in zip(sides, boundary) if b == "periodic"]
    return min(periodic) if periodic else sides[0]


def _semantic_violations(cfg: dict, dim_cap: int) -> list[str]:
    out = []
    lat, model, state, grid = cfg["lattice"], cfg["model"], cfg["state"], cfg["grid"]
    sides = lat["sides"]
    boundary = lat["boundary"]
    if isinstance(boundary, str):
        boundary = [boundary] * len(sides)
    if len(boundary) != len(sides):
        out.append(f"lattice.boundary has {len(boundary)} entries for {len(sides)} axes")
        return out
    if "d" in lat and lat["d"] != len(sides):
        out.append(f"lattice.d = {lat['d']} does not match {len(sides)} side lengths")
    n_sites = math.prod(sides)
    if n_sites > math.log2(dim_cap):
        out.append(f"lattice: {n_sites} sites give dimension 2^{n_sites} > cap {dim_cap} (DimensionOverflow)")
    if model["family"] == "tv_fermion":
        if "periodic" in boundary:
            out.append(
                "lattice.boundary: periodic tv_fermion lattices are rejected (PeriodicFermionUnsupported); "
                "use an open chain or an xxz ring"
            )
        if len(sides) > 1:
            out.append("lattice.sides: tv_fermion is only supported on d=1 chains (UnsupportedLattice)")
    bond = ModelSpec(model["family"], lam=model["lam"], T=model["T"], V=model["V"]).bond_matrix()
    if not np.any(bond):
        out.append("model: the bond term vanishes, so no Lieb-Robinson velocity can be estimated")
    if state["kind"] in ("boosted_gibbs", "momentum_eigenstate") and boundary[0] != "periodic":
        out.append(f"state.kind = {state['kind']} needs a periodic first axis (NotARing)")
    if state["kind"] == "momentum_eigenstate" and len(sides) != 1:
        out.append("state.kind = momentum_eigenstate is built on d=1 rings only (NotARing)")
    reach = _horizon_length(sides, boundary) / 2 - 1 - grid["margin"]
    if reach <= 0:
        out.append(
            f"grid.margin = {grid['margin']} leaves no evolution time on side {_horizon_length(sides, boundary)} "
            "(HorizonNonpositive)"
        )
    return out


def validate_config(data, dim_cap: int | None = None) -> list[str]:
    """Every schema violation, then (if the schema passes) every semantic one."""
    dim_cap = dim_cap or env_dim_cap()
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: (_path(e), e.validator))
    violations = [_describe(e) for e in errors]
    if violations:
        return violations
    return _semantic_violations(_merge(DEFAULTS, data), dim_cap)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec
    lattice: LatticeSpec
    state: dict
    grid: dict
    tolerances: dict
    output_dir: str
    seed: int
    raw: dict = field(repr=False)

    @classmethod
    def from_dict(cls, data: dict, dim_cap: int | None = None) -> "ExperimentConfig":
        dim_cap = dim_cap or env_dim_cap()
        violations = validate_config(data, dim_cap)
        if violations:
            raise ConfigError(violations)
        cfg = _merge(DEFAULTS, data)
        m, lat = cfg["model"], cfg["lattice"]
        model = ModelSpec(m["family"], lam=float(m["lam"]), T=float(m["T"]), V=float(m["V"]))
        boundary = lat["boundary"] if isinstance(lat["boundary"], str) else tuple(lat["boundary"])
        lattice = LatticeSpec(tuple(lat["sides"]), boundary, dim_cap=dim_cap)
        cfg["lattice"]["d"] = lattice.d
        return cls(model, lattice, cfg["state"], cfg["grid"], cfg["tolerances"], cfg["output_dir"], cfg["seed"], cfg)

    @classmethod
    def load(cls, path, dim_cap: int | None = None) -> "ExperimentConfig":
        return cls.from_dict(read_json(path), dim_cap)

    def to_dict(self) -> dict:
        """Resolved config that validates again (unset optional fields are omitted)."""
        return {key: {k: v for k, v in val.items() if v is not None} if isinstance(val, dict) else val
                for key, val in copy.deepcopy(self.raw).items() if val is not None}


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError([f"config file {path} does not exist"]) from None
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError([f"config file {path} is not UTF-8 JSON: {exc}"]) from None


# --- run bookkeeping ---------------------------------------------------------


@dataclass
class Assertion:
    """One pass/fail line; ``passed is None`` marks a reported-only quantity."""

    name: str
    invariant: str
    value: float | None
    tol: float | None
    passed: bool | None
    note: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "invariant": self.invariant, "value": self.value,
                "tol": self.tol, "passed": self.passed, "note": self.note}


def _check(name, invariant, value, tol, *, applies=True, note="") -> Assertion:
    value = None if value is None else float(value)
    if not applies or value is None:
        return Assertion(name, invariant, value, tol, None, note)
    return Assertion(name, invariant, value, tol, bool(value <= tol), note)


@dataclass
class RunResult:
    manifest: dict
    out_dir: Path

    @property
    def passed(self) -> bool:
        return self.manifest["passed"]

    @property
    def exit_code(self) -> int:
        return EXIT_OK if self.passed else EXIT_NUMERIC

    def assertion(self, name: str) -> dict:
        return next(a for a in self.manifest["assertions"] if a["name"] == name)


@contextmanager
def _timed(timings: dict, stage: str):
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[stage] = time.perf_counter() - start


def _clean(obj):
    """JSON-safe copy: NaN/inf become null, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def _write_json(path: Path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_clean(payload), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- pipeline stages ---------------------------------------------------------


@dataclass
class _Setup:
    hamiltonian: object
    propagator: Propagator


def _build(config: ExperimentConfig) -> _Setup:
    h = assemble_hamiltonian(config.model, config.lattice)
    hb = sector_decompose(h, total_charge(config.model, config.lattice))
    return _Setup(hb, Propagator.from_hamiltonian(hb, label=config.model.family))


def build_state(config: ExperimentConfig, setup: _Setup) -> QuantumState:
    spec, model, lattice = config.state, config.model, config.lattice
    kind = spec["kind"]
    if kind in ("gibbs", "boosted_gibbs"):
        state = gibbs_state(setup.hamiltonian, float(spec["beta"]), setup.propagator)
        if kind == "boosted_gibbs":
            state = boost_state(state, int(spec["boost_k"]), lattice, model)
        return state
    if kind == "tilted_ground":
        return current_tilted_ground_state(setup.hamiltonian, total_current(model, lattice), float(spec["tilt"]))
    return momentum_eigenstate(lattice, int(spec["momentum_k"]))


def _state_checks(config: ExperimentConfig, state: QuantumState, measurements: dict) -> list[Assertion]:
    tol = config.tolerances["invariance_tol"]
    errs = state.invariant_errors()
    checks = [_check("state_valid", "QuantumState normalization/hermiticity/positivity/trace",
                     max(errs.values()), STATE_TOL)]
    lattice = config.lattice
    ring = lattice.is_ring
    dev = verify_translation_invariance(state, lattice) if ring else None
    checks.append(_check("translation_invariance", "||[rho, T]||_max on every periodic axis", dev, tol,
                         applies=ring, note="" if ring else "open first axis"))
    values = bond_current_expectations(state, config.model, lattice)
    origin = tuple([0] * lattice.d)
    current = values[origin]
    spread = max(abs(v - current) for v in values.values()) if lattice.is_periodic(0) else None
    checks.append(_check("bond_uniform_current", "max_x |<j(x,x+e1)> - <j(0,e1)>|", spread, tol,
                         applies=lattice.is_periodic(0)))
    state.current_expectation = float(current)
    measurements.update(
        current=float(current),
        zero_current=abs(current) < ZERO_CURRENT,
        invariance_deviation=dev,
        bond_current_spread=spread,
        state_errors=errs,
        state_recipe=state.recipe,
    )
    return checks


def _fit_window(config: ExperimentConfig):
    """Displacements with max-norm <= fit_radius and fit_t_count times on [0, fit_t_max].

    The default window (|z| <= 4, t <= 1 / max coupling) does not depend on
    the lattice size, so fitted velocities are comparable across sizes.
    """
    lattice = config.lattice
    displacements = lattice.displacements(int(config.grid["fit_radius"]))
    v0 = default_velocity(max_coupling(config.model))
    t_fit = config.grid["fit_t_max"] or 1.0 / max_coupling(config.model)
    return displacements, time_grid(t_fit, config.grid["fit_t_count"]), v0


def _lr_stage(config: ExperimentConfig, setup: _Setup, measurements: dict):
    displacements, times, v0 = _fit_window(config)
    try:
        fit = lr_norm_profile_and_fit(config.model, config.lattice, setup.propagator, displacements, times)
    except InsufficientData as exc:
        measurements.update(V_lr=v0, C_lr=None, v_source="default")
        return None, [Assertion("lr_fit", "at least 6 norm-profile points above threshold", None, None, False, str(exc))]
    measurements.update(V_lr=fit.v_lr, C_lr=fit.c_lr, v_source="fit", fit_t_max=float(times[-1]))
    gap = fit.dominance_gap()
    return fit, [_check("lr_envelope_dominates", "comm_norm(z,t) <= C_lr |n| |h| exp(-|z| + V_lr t)", gap, T0_TOL)]


def _grid_stage(config: ExperimentConfig, setup: _Setup, state: QuantumState, t_max: float, with_norms: bool):
    radius = None if config.grid["z_chart"] == "full" else int(config.grid["z_chart"])
    return compute_grid(state, config.model, config.lattice, setup.propagator, time_grid(t_max, config.grid["t_count"]),
                        displacements=config.lattice.displacements(radius), with_norms=with_norms, t_max=t_max)


def _grid_checks(grid) -> list[Assertion]:
    inv = grid_invariants(grid)
    checks = [
        _check("correlator_imaginary", "max |Re C(z,r,t)|", inv["real_part"], ALGEBRA_TOL),
        _check("truncated_identity", "max |C - (CT - conj CT)|", inv["truncated_identity"], ALGEBRA_TOL),
        _check("two_truncated_bound", "max (|C| - 2|CT|)", inv["two_truncated_bound"], ALGEBRA_TOL),
        _check("t0_noncontact", "max |C(z,r,0)| over bonds not touching the origin", inv.get("t0_noncontact"), T0_TOL),
    ]
    known = not np.isnan(grid.comm_norm).all()
    checks.append(_check("norm_dominates", "max (|C| - comm_norm)", inv["norm_dominates"] if known else None,
                         ALGEBRA_TOL, applies=known))
    return checks


def _sum_rule_checks(config: ExperimentConfig, grid, current: float):
    """S(t) plus the t=0 and all-t sum-rule assertions (rings only; all-t for d=1)."""
    tol = config.tolerances
    try:
        S = weighted_sum_rule(grid)
    except IncompleteGrid as exc:
        note = f"grid incomplete: {exc}"
        return None, [Assertion("sum_rule_t0", "|S(0) - <j>|", None, tol["sum_rule_tol_t0"], None, note),
                      Assertion("sum_rule", "max_t |S(t) - <j>|", None, tol["sum_rule_tol"], None, note)]
    ring = config.lattice.is_ring
    drift = np.abs(S - current)
    return S, [
        _check("sum_rule_t0", "|S(0) - <j>|", drift[0], tol["sum_rule_tol_t0"], applies=ring,
               note="" if ring else "open first axis: reported only"),
        _check("sum_rule", "max_t |S(t) - <j>| for |t| <= t_max", drift.max(), tol["sum_rule_tol"],
               applies=ring and config.lattice.d == 1,
               note="" if ring and config.lattice.d == 1 else "reported only off d=1 rings"),
    ]


def _wraparound(config, setup, state, t_max, current):
    count = config.grid["wraparound_count"]
    if count == 0:
        return None
    radius = None if config.grid["z_chart"] == "full" else int(config.grid["z_chart"])
    times = t_max * (1.0 + np.arange(1, count + 1) / count)
    grid = compute_grid(state, config.model, config.lattice, setup.propagator, times,
                        displacements=config.lattice.displacements(radius), with_norms=False)
    try:
        drift = np.abs(weighted_sum_rule(grid) - current)
    except IncompleteGrid:
        return None
    beyond = [float(t) for t, d in zip(times, drift) if d > config.tolerances["sum_rule_tol"]]
    return {"times": times, "drift": drift, "exceeds_tol_at": beyond,
            "monotone": bool(np.all(np.diff(drift) >= 0))}


def _plot(report, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "slowdecay"
    fig, ax = plt.subplots(figsize=(5, 3.6))
    t = report.times
    pos = t > 0
    w_ok = pos & (report.W > 0)
    r_ok = pos & (report.bound_rhs > 0)
    ax.plot(t[w_ok], report.W[w_ok], "o-", label="W(t) = Σ|C|")
    ax.plot(t[r_ok], report.bound_rhs[r_ok], "s--", label="(|j| − ε)/(V t + N + ½)")
    if w_ok.any() and (r_ok.any() or report.W[w_ok].min() > 0):
        ax.set_xscale("log")
        ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.set_title(f"N = {report.N}, ε = {report.eps:.2e}, V = {report.v_lr:.3g}")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _finish(config, stage, out_dir, timings, measurements, assertions, artifacts, invocation) -> RunResult:
    asserted = [a for a in assertions if a.passed is not None]
    manifest = {
        "tool": "slowdecay",
        "stage": stage,
        "version": {"slowdecay": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                    "python": platform.python_version()},
        "config": config.to_dict(),
        "invocation": invocation or {},
        "timings_s": timings,
        "measurements": measurements,
        "assertions": [a.to_dict() for a in assertions],
        "passed": all(a.passed for a in asserted),
        "artifacts": {name: sha256(out_dir / name) for name in artifacts},
    }
    _write_json(out_dir / "manifest.json", manifest)
    return RunResult(_clean(manifest), out_dir)


def run_experiment(config: ExperimentConfig, out_dir=None, *, stage: str = "run", invocation: dict | None = None) -> RunResult:
    """Execute ``stage`` ('run', 'sumrule' or 'lrfit') and write its artifacts."""
    if stage not in ("run", "sumrule", "lrfit"):
        raise ValueError(f"unknown stage {stage!r}")
    out_dir = Path(out_dir or config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    timings, measurements, assertions, artifacts = {}, {}, [], []
    length = _horizon_length(config.lattice.sides, config.lattice.boundary)

    with _timed(timings, "propagator"):
        setup = _build(config)
    measurements["dim"] = config.lattice.dim
    measurements["sector_sizes"] = [len(b.indices) for b in setup.propagator.blocks]

    if stage == "lrfit":
        with _timed(timings, "lr_fit"):
            fit, checks = _lr_stage(config, setup, measurements)
        assertions += checks
        _write_json(out_dir / "lr_fit.json", fit.to_dict() if fit else {"error": checks[0].note})
        artifacts.append("lr_fit.json")
        return _finish(config, stage, out_dir, timings, measurements, assertions, artifacts, invocation)

    with _timed(timings, "state"):
        state = build_state(config, setup)
        assertions += _state_checks(config, state, measurements)
    current = 0.0 if measurements["zero_current"] else measurements["current"]

    fit = None
    if stage == "run":
        with _timed(timings, "lr_fit"):
            fit, checks = _lr_stage(config, setup, measurements)
        assertions += checks
        v_lr = measurements["V_lr"]
    else:
        v_lr = config.grid["v_lr"] or default_velocity(max_coupling(config.model))
        measurements.update(V_lr=v_lr, v_source="config" if config.grid["v_lr"] else "default")
    t_max = lr_horizon(v_lr, length, 1, config.grid["margin"])
    measurements["t_max"] = t_max

    with _timed(timings, "grid"):
        grid = _grid_stage(config, setup, state, t_max, with_norms=config.grid["with_norms"])
    grid.to_csv(out_dir / "grid.csv")
    artifacts.append("grid.csv")
    assertions += _grid_checks(grid)
    S, checks = _sum_rule_checks(config, grid, current)
    assertions += checks
    if S is not None:
        measurements["S0"] = complex(S[0]).real
        measurements["max_sum_rule_drift"] = float(np.abs(S - current).max())

    if stage == "sumrule":
        _write_json(out_dir / "sum_rule.json", {
            "times": grid.times, "S_re": None if S is None else S.real, "S_im": None if S is None else S.imag,
            "current": current, "t_max": t_max, "V": v_lr,
        })
        artifacts.append("sum_rule.json")
        return _finish(config, stage, out_dir, timings, measurements, assertions, artifacts, invocation)

    with _timed(timings, "decay_report"):
        payload = {"t_max": t_max, "lr_fit": fit.to_dict() if fit else None}
        report = None
        try:
            report = decay_report(grid, current, v_lr, measurements.get("C_lr"),
                                  fraction=config.tolerances["eps_fraction"], tol=config.tolerances["bound_tol"])
        except (TailTooHeavy, IncompleteGrid) as exc:
            payload["error"] = str(exc)
            assertions.append(Assertion("decay_bound", "min_t margin(t)", None, None, False, str(exc)))
        if report is not None:
            payload["report"] = report.to_dict()
            measurements.update(min_margin=float(report.margin.min()), eps=report.eps, N=report.N)
            assertions.append(_check("decay_bound", "-min_t [W(t) - (|j| - eps)/(V t + N + 1/2)]",
                                     -report.margin.min(), report.tol))
            if current != 0.0:
                assertions.append(_check("tail_fraction", "eps / |<j>|", report.eps / abs(current),
                                         config.tolerances["eps_fraction"]))
            assertions.append(_check("bound_rhs_monotone", "max_t diff bound_rhs(t)",
                                     float(np.diff(report.bound_rhs).max(initial=0.0)), 0.0))
        wrap = _wraparound(config, setup, state, t_max, current)
        payload["wraparound"] = wrap
        if wrap is not None:
            measurements["wraparound_max_drift"] = float(wrap["drift"].max())
    _write_json(out_dir / "decay_report.json", payload)
    artifacts.append("decay_report.json")
    if report is not None:
        _plot(report, out_dir / "decay.svg")
        artifacts.append("decay.svg")
    return _finish(config, stage, out_dir, timings, measurements, assertions, artifacts, invocation)


def reports_from_grid(grid_csv, current: float, v_lr: float, eps_fraction: float = EPS_FRACTION,
                      tol: float = BOUND_TOL, n_chart: int | None = None):
    """Recompute S(t), W(t) and the decay report from a written ``grid.csv``."""
    grid = CorrelationGrid.from_csv(grid_csv, n_chart=n_chart)
    return weighted_sum_rule(grid), absolute_sum(grid), decay_report(grid, current, v_lr, fraction=eps_fraction, tol=tol)


# --- sweeps --------------------------------------------------------------------


def _apply_point(base: dict, point: dict) -> dict:
    cfg = copy.deepcopy(base)
    for key, value in point.items():
        if key == "L":
            cfg["lattice"]["sides"] = [int(value), *cfg["lattice"]["sides"][1:]]
        elif key == "lam":
            cfg.setdefault("model", {})["lam"] = value
        else:
            cfg.setdefault("state", {})[key] = value
    return cfg


def sweep_points(sweep: dict) -> list[dict]:
    axes = sweep.get("axes") or {}
    unknown = sorted(set(axes) - set(SWEEP_AXES))
    if unknown:
        raise ConfigError([f"axes.{k} is not a sweepable axis ({', '.join(SWEEP_AXES)})" for k in unknown])
    names = [k for k in SWEEP_AXES if k in axes]
    values = [list(axes[k]) for k in names]
    if any(not v for v in values):
        raise ConfigError(["every sweep axis needs at least one value"])
    points = [dict(zip(names, combo)) for combo in itertools.product(*values)]
    limit = sweep.get("max_points", MAX_SWEEP_POINTS)
    if len(points) > limit:
        raise ConfigError([f"sweep has {len(points)} points > max_points {limit}"])
    return points


def _run_point(args):
    index, cfg, out_dir, dim_cap = args
    row = {"point": index, "status": "error", "current": None, "max_sum_rule_drift": None,
           "min_margin": None, "V_lr": None, "t_max": None, "error": ""}
    try:
        result = run_experiment(ExperimentConfig.from_dict(cfg, dim_cap), out_dir, invocation={"sweep_point": index})
        m = result.manifest["measurements"]
        row.update(status="ok" if result.passed else "failed", current=m.get("current"),
                   max_sum_rule_drift=m.get("max_sum_rule_drift"), min_margin=m.get("min_margin"),
                   V_lr=m.get("V_lr"), t_max=m.get("t_max"))
        if not result.passed:
            row["error"] = ",".join(a["name"] for a in result.manifest["assertions"] if a["passed"] is False)
    except (SlowDecayError, MemoryError, ValueError) as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def _fmt_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def run_sweep(sweep: dict, out_dir=None, workers: int | None = None, dim_cap: int | None = None) -> tuple[list[dict], int]:
    """Run every point of ``sweep`` and write ``sweep_summary.csv``; returns (rows, exit code)."""
    dim_cap = dim_cap or env_dim_cap()
    base = sweep.get("base")
    if base is None:
        raise ConfigError(["sweep.base (an experiment config) is required"])
    points = sweep_points(sweep)
    configs = [_apply_point(base, p) for p in points]
    violations = [f"point {i}: {v}" for i, c in enumerate(configs) for v in validate_config(c, dim_cap)]
    if violations:
        raise ConfigError(violations)
    out_dir = Path(out_dir or sweep.get("output_dir") or base.get("output_dir") or "runs/sweep")
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(i, c, out_dir / f"point_{i:03d}", dim_cap) for i, c in enumerate(configs)]
    workers = workers or env_workers()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_point, jobs))
    else:
        rows = [_run_point(job) for job in jobs]
    rows.sort(key=lambda r: r["point"])
    for row, cfg in zip(rows, configs):
        row.update(L=cfg["lattice"]["sides"][0], lam=cfg["model"].get("lam", DEFAULTS["model"]["lam"]),
                   beta=cfg["state"].get("beta", DEFAULTS["state"]["beta"]),
                   boost_k=cfg["state"].get("boost_k", DEFAULTS["state"]["boost_k"]),
                   tilt=cfg["state"].get("tilt", DEFAULTS["state"]["tilt"]))
    columns = ["point", *SWEEP_AXES, "status", "current", "max_sum_rule_drift", "min_margin", "V_lr", "t_max", "error"]
    with open(out_dir / "sweep_summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt_cell(row[c]) for c in columns])
    code = EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_NUMERIC
    return rows, code
