"""Command-line driver: ``plqt <experiment> --config <path> [overrides]``.

Experiments: ``qubit``, ``hubbard``, ``exact``, ``benchmark`` and
``sweep-lambda``. Each writes a CSV table and a JSON meta file next to it.
The config file is flat ``key = value``; command-line options win over it,
and ``PLQT_WORKERS`` supplies the default worker count.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .engine import NormPreservingDrift, NormPreservingJumps, run_ensemble
from .exact import integrate_master, model_rhs
from .linops import SIGMA_X, SIGMA_Z, random_hermitian, random_operator, random_state
from .model import JumpChannel, PseudoLindbladModel
from .redfield import (
    BathSpec,
    LambdaPolicy,
    RedfieldModel,
    lambda_local,
    negative_channel_norm,
    negative_rate,
    redfield_rhs,
    to_pseudo_lindblad,
)
from .systems import (
    bloch_state,
    cdw_state,
    eternal_qubit,
    hubbard_chain,
    interaction_energy_observable,
    site_density_couplings,
)

EXPERIMENTS = ("qubit", "hubbard", "exact", "benchmark", "sweep-lambda")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class RunConfig:
    experiment: str = "qubit"
    n_traj: int = 1000
    dt: float = 0.01
    t_final: float = 6.0
    record_every: int = 1
    seed: int = 12345
    workers: int = 1
    lambda_mode: str = "local"
    rate_policy: str = "jumps"
    drift: str = "exponential"
    system: str = "qubit"  # exact / sweep-lambda target
    # qubit
    theta: float = math.pi / 4
    phi: float = math.pi / 4
    # hubbard / Redfield
    sites: int = 4
    particles: int = 2
    J: float = 1.0
    V: float = 7.0
    gamma: float = 0.02
    temperature: float = 1.0
    boundary: str = "periodic"
    pattern: str = ""
    include_lamb_shift: bool = True
    # benchmark
    dims: str = "64,128,256,512"
    reps: int = 5
    # sweep-lambda
    lambda_min: float = 0.1
    lambda_max: float = 4.0
    lambda_points: int = 400
    n_states: int = 5
    output_path: str = "plqt_out.csv"

    def validate(self) -> "RunConfig":
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment: expected one of {EXPERIMENTS}, got {self.experiment!r}")
        if not self.dt > 0:
            raise ConfigError(f"dt: must be positive, got {self.dt}")
        if not self.t_final >= self.dt:
            raise ConfigError(f"t_final: must be at least dt, got {self.t_final}")
        for name in ("n_traj", "workers", "record_every", "reps", "lambda_points", "n_states"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be at least 1, got {getattr(self, name)}")
        if self.rate_policy not in ("jumps", "drift"):
            raise ConfigError(f"rate_policy: expected 'jumps' or 'drift', got {self.rate_policy!r}")
        if self.drift not in ("exponential", "euler"):
            raise ConfigError(f"drift: expected 'exponential' or 'euler', got {self.drift!r}")
        if self.boundary not in ("periodic", "open"):
            raise ConfigError(f"boundary: expected 'periodic' or 'open', got {self.boundary!r}")
        if self.system not in ("qubit", "hubbard"):
            raise ConfigError(f"system: expected 'qubit' or 'hubbard', got {self.system!r}")
        try:
            LambdaPolicy.parse(self.lambda_mode)
        except ValueError as exc:
            raise ConfigError(f"lambda_mode: {exc}") from None
        try:
            self.dim_list()
        except ValueError:
            raise ConfigError(f"dims: expected comma-separated integers, got {self.dims!r}") from None
        if not 0 < self.lambda_min < self.lambda_max:
            raise ConfigError("lambda_min/lambda_max: need 0 < lambda_min < lambda_max")
        return self

    def dim_list(self):
        dims = [int(d) for d in str(self.dims).split(",") if d.strip()]
        if not dims or any(d < 1 for d in dims):
            raise ValueError(self.dims)
        return dims

    def grid(self) -> np.ndarray:
        h = self.dt * self.record_every
        n = int(round(self.t_final / h))
        if n < 1 or abs(n * h - self.t_final) > 1e-9 * max(1.0, self.t_final):
            raise ConfigError(f"t_final: {self.t_final} is not a multiple of dt*record_every = {h}")
        return np.arange(n + 1) * h


_ALIASES = {"m": "sites", "n_p": "particles", "np": "particles", "t": "temperature",
            "output": "output_path", "lamb_shift": "include_lamb_shift"}
_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_FIELDS_LOWER = {name.lower(): name for name in _FIELDS}


def _field_name(key: str) -> str:
    k = key.strip().replace("-", "_")
    if k in _FIELDS:
        return k
    k = _ALIASES.get(k.lower(), k.lower())
    if k in _FIELDS_LOWER:
        return _FIELDS_LOWER[k]
    raise ConfigError(f"{key}: unknown configuration key")


def _coerce(name: str, value):
    kind = _FIELDS[name].type
    if not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text, 0)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {kind}") from None
    return text


def read_config_file(path) -> dict:
    """Flat ``key = value`` file (``#`` comments allowed) as a dict of raw strings."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    text = Path(path).read_text(encoding="utf-8")
    parser.read_string("[plqt]\n" + text)
    return dict(parser["plqt"])


def build_config(experiment: str, file_values: dict | None = None, overrides: dict | None = None,
                 env=None) -> RunConfig:
    """Merge defaults < environment < config file < command line."""
    env = os.environ if env is None else env
    values = {"experiment": experiment}
    if env.get("PLQT_WORKERS"):
        values["workers"] = _coerce("workers", env["PLQT_WORKERS"])
    for source in (file_values or {}, overrides or {}):
        for key, raw in source.items():
            if raw is None:
                continue
            name = _field_name(key)
            if name == "experiment":
                continue
            values[name] = _coerce(name, raw)
    return RunConfig(**values).validate()


# --------------------------------------------------------------------------
# output


def _fmt(x) -> str:
    return format(float(x), ".17g")


def format_csv(columns: dict) -> str:
    """Header plus rows, 17 significant digits, ``\\n`` line endings."""
    names = list(columns)
    data = [np.asarray(columns[n], dtype=float) for n in names]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for row in zip(*data):
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def read_csv(path) -> dict:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    names = rows[0]
    vals = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(names))
    return {n: vals[:, i] for i, n in enumerate(names)}


@dataclass
class ResultBundle:
    meta: dict
    columns: dict
    extra: dict = field(default_factory=dict)  # name -> columns, written as <stem>_<name>.csv


def _paths(output_path: str):
    p = Path(output_path)
    if p.suffix != ".csv":
        p = p.with_name(p.name + ".csv")
    return p, p.with_suffix(".json")


def write_bundle(bundle: ResultBundle, output_path: str) -> list:
    csv_path, json_path = _paths(output_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    written = [csv_path]
    csv_path.write_text(format_csv(bundle.columns), encoding="utf-8", newline="")
    for name, cols in bundle.extra.items():
        p = csv_path.with_name(f"{csv_path.stem}_{name}.csv")
        p.write_text(format_csv(cols), encoding="utf-8", newline="")
        written.append(p)
    json_path.write_text(json.dumps(bundle.meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(json_path)
    return written


def _series_columns(grid, names, stats=None, values=None, trace=None):
    """CSV columns: t, means, ``_stderr``s, mean_sign, signed_trace."""
    cols = {"t": grid}
    if stats is not None:
        means, errs = values
        for n, v in zip(names, means):
            cols[n] = v
        for n, e in zip(names, errs):
            cols[n + "_stderr"] = e
        cols["mean_sign"] = stats.mean_sign
        cols["signed_trace"] = stats.signed_trace
    else:
        for n, v in zip(names, values):
            cols[n] = v
        for n in names:
            cols[n + "_stderr"] = np.zeros_like(grid)
        cols["mean_sign"] = np.ones_like(grid)
        cols["signed_trace"] = trace
    return cols


def _meta(cfg: RunConfig, t0: float, **extra) -> dict:
    meta = {
        "config": dataclasses.asdict(cfg),
        "master_seed": cfg.seed,
        "version": __version__,
        "jump_counts": {},
        "warnings": [],
    }
    meta.update(extra)
    meta["wall_time_s"] = time.perf_counter() - t0
    return meta


# --------------------------------------------------------------------------
# experiments


QUBIT_COLUMNS = ("rho00", "re_rho01", "im_rho01")
_P0 = np.array([[1, 0], [0, 0]], dtype=complex)
_COH = np.array([[0, 0], [1, 0]], dtype=complex)  # tr(rho A) = rho_01


def _qubit_setup(cfg):
    return eternal_qubit(), bloch_state(cfg.theta, cfg.phi)


def _hubbard_setup(cfg):
    H, basis = hubbard_chain(cfg.sites, cfg.particles, cfg.J, cfg.V, cfg.boundary)
    bath = BathSpec(cfg.gamma, cfg.temperature)
    rm = RedfieldModel(H, [(S, bath) for S in site_density_couplings(basis)], cfg.include_lamb_shift)
    psi0 = cdw_state(basis, cfg.pattern or None)
    A = interaction_energy_observable(basis, cfg.V, cfg.boundary)
    return rm, psi0, A


def _qubit_redfield(cfg):
    """Two-level system ``H = sigma_z / 2`` coupled through ``sigma_x`` to an Ohmic bath."""
    return RedfieldModel(0.5 * SIGMA_Z, [(SIGMA_X, BathSpec(cfg.gamma, cfg.temperature))], cfg.include_lamb_shift)


def _hubbard_columns(grid, a_mean, a_err, a0, stats=None, trace=None):
    names = ("interaction_energy", "scaled_interaction_energy")
    vals = (a_mean, a_mean / a0)
    if stats is None:
        return _series_columns(grid, names, values=vals, trace=trace)
    return _series_columns(grid, names, stats, (vals, (a_err, a_err / abs(a0))))


def run_qubit(cfg: RunConfig) -> ResultBundle:
    t0 = time.perf_counter()
    m, psi0 = _qubit_setup(cfg)
    policy = NormPreservingDrift.eternal_qubit() if cfg.rate_policy == "drift" else NormPreservingJumps()
    stats = run_ensemble(m, psi0, 1, cfg.grid(), [_P0, _COH], policy, cfg.n_traj, cfg.seed, cfg.workers,
                         cfg.dt, cfg.drift)
    means = (stats.mean[0].real, stats.mean[1].real, stats.mean[1].imag)
    errs = (stats.stderr[0].real, stats.stderr[1].real, stats.stderr[1].imag)
    cols = _series_columns(stats.grid, QUBIT_COLUMNS, stats, (means, errs))
    jumps = {ch.label: int(n) for ch, n in zip(m.channels, stats.n_jumps)}
    return ResultBundle(_meta(cfg, t0, jump_counts=jumps, warnings=stats.warnings), cols)


def _exact_hubbard(cfg, grid):
    rm, psi0, A = _hubbard_setup(cfg)
    sol = integrate_master(lambda t, r: redfield_rhs(rm, r), np.outer(psi0, psi0.conj()), grid, cfg.dt)
    a = sol.expectation(A).real
    return _hubbard_columns(grid, a, None, a[0], trace=np.trace(sol.rho, axis1=1, axis2=2).real)


def run_hubbard(cfg: RunConfig) -> ResultBundle:
    t0 = time.perf_counter()
    grid = cfg.grid()
    rm, psi0, A = _hubbard_setup(cfg)
    m = to_pseudo_lindblad(rm, LambdaPolicy.parse(cfg.lambda_mode))
    stats = run_ensemble(m, psi0, 1, grid, [A], NormPreservingJumps(), cfg.n_traj, cfg.seed, cfg.workers,
                         cfg.dt, cfg.drift)
    a0 = float(np.vdot(psi0, A @ psi0).real)
    cols = _hubbard_columns(stats.grid, stats.mean[0].real, stats.stderr[0].real, a0, stats)
    jumps = {ch.label: int(n) for ch, n in zip(m.channels, stats.n_jumps)}
    meta = _meta(cfg, t0, jump_counts=jumps, warnings=stats.warnings,
                 scaling="scaled_interaction_energy = interaction_energy / its value at t=0")
    return ResultBundle(meta, cols, {"exact": _exact_hubbard(cfg, grid)})


def run_exact(cfg: RunConfig) -> ResultBundle:
    t0 = time.perf_counter()
    grid = cfg.grid()
    if cfg.system == "hubbard":
        return ResultBundle(_meta(cfg, t0), _exact_hubbard(cfg, grid))
    m, psi0 = _qubit_setup(cfg)
    sol = integrate_master(model_rhs(m), np.outer(psi0, psi0.conj()), grid, cfg.dt)
    vals = (sol.element(0, 0).real, sol.element(0, 1).real, sol.element(0, 1).imag)
    cols = _series_columns(grid, QUBIT_COLUMNS, values=vals, trace=np.trace(sol.rho, axis1=1, axis2=2).real)
    return ResultBundle(_meta(cfg, t0), cols)


def _benchmark_model(d: int, rng):
    H = random_hermitian(d, rng)
    L1 = random_operator(d, rng, scale=1.0 / np.sqrt(d))
    L2 = random_operator(d, rng, scale=1.0 / np.sqrt(d))
    return PseudoLindbladModel(H, [JumpChannel("a", L1, 0.1), JumpChannel("b", L2, -0.05)])


def benchmark(dims, reps: int, seed: int = 0, dt: float = 1e-3) -> dict:
    """Median wall time of one trajectory step and one RK4 master step per ``D``.

    Memory figures are operator counts times ``16 D**2`` bytes: the trajectory
    path stores the drift propagator and the jump operators; the master path
    stores ``H``, each ``L`` and ``L^+ L``, ``rho``, four RK4 stages and a
    stage buffer.
    """
    from .engine import _step_block

    dims = list(dims)
    if dims != sorted(dims):
        raise ValueError("dims must be ascending")
    rows = {k: [] for k in ("D", "trajectory_step_s", "master_step_s", "time_ratio",
                            "trajectory_memory_bytes", "master_memory_bytes")}
    rng = np.random.default_rng(seed)
    policy = NormPreservingJumps()
    for d in dims:
        m = _benchmark_model(d, rng)
        psi = random_state(d, rng)[None, :]
        sign = np.ones(1, dtype=np.int64)
        u = np.array([0.5])
        rho = np.outer(psi[0], psi[0].conj())
        rhs = model_rhs(m)
        _step_block(m, psi, sign, 0.0, dt, policy, u)  # builds and caches the propagator

        def traj():
            _step_block(m, psi, sign, 0.0, dt, policy, u)

        def master():
            k1 = rhs(0.0, rho)
            k2 = rhs(0.5 * dt, rho + 0.5 * dt * k1)
            k3 = rhs(0.5 * dt, rho + 0.5 * dt * k2)
            k4 = rhs(dt, rho + dt * k3)
            return rho + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

        tt = _median_time(traj, reps)
        tm = _median_time(master, reps)
        c = len(m.channels)
        rows["D"].append(d)
        rows["trajectory_step_s"].append(tt)
        rows["master_step_s"].append(tm)
        rows["time_ratio"].append(tm / tt)
        rows["trajectory_memory_bytes"].append((1 + c) * 16 * d * d)
        rows["master_memory_bytes"].append((1 + 2 * c + 6) * 16 * d * d)
    return rows


def _median_time(fn, reps):
    # repeat short calls so each sample is long enough for the timer
    n = 1
    while True:
        t = time.perf_counter()
        for _ in range(n):
            fn()
        if time.perf_counter() - t > 2e-3 or n >= 1 << 14:
            break
        n *= 4
    samples = []
    for _ in range(reps):
        t = time.perf_counter()
        for _ in range(n):
            fn()
        samples.append((time.perf_counter() - t) / n)
    return float(np.median(samples))


def run_benchmark(cfg: RunConfig) -> ResultBundle:
    t0 = time.perf_counter()
    rows = benchmark(cfg.dim_list(), cfg.reps, cfg.seed)
    meta = _meta(cfg, t0, memory_model="operator count x 16 bytes x D^2 (analytic estimate, not RSS)")
    return ResultBundle(meta, rows)


def sweep_lambda(cfg: RunConfig) -> tuple:
    """``tr L_-^+ L_-`` and negative rates of sampled states across a lambda grid (coupling 0)."""
    if cfg.system == "hubbard":
        rm = _hubbard_setup(cfg)[0]
    else:
        rm = _qubit_redfield(cfg)
    S, SS = rm.coupling_operators[0], rm.conv_ops[0]
    lams = np.linspace(cfg.lambda_min, cfg.lambda_max, cfg.lambda_points)
    rng = np.random.default_rng(cfg.seed)
    states = [random_state(rm.dimension, rng) for _ in range(cfg.n_states)]
    cols = {"lambda": lams, "trace_negative": np.array([negative_channel_norm(S, SS, l) for l in lams])}
    rates = np.array([[negative_rate(S, SS, psi, l) for l in lams] for psi in states])
    cols["mean_negative_rate"] = rates.mean(axis=0)
    for k, r in enumerate(rates):
        cols[f"rate_state_{k}"] = r
    info = {
        "lambda_global": rm.global_lambdas()[0],
        "lambda_local": [lambda_local(S, SS, psi) for psi in states],
        "grid_argmin_trace": float(lams[np.argmin(cols["trace_negative"])]),
        "grid_argmin_rate": [float(lams[np.argmin(r)]) for r in rates],
    }
    return cols, info


def run_sweep(cfg: RunConfig) -> ResultBundle:
    t0 = time.perf_counter()
    cols, info = sweep_lambda(cfg)
    return ResultBundle(_meta(cfg, t0, **info), cols)


RUNNERS = {
    "qubit": run_qubit,
    "hubbard": run_hubbard,
    "exact": run_exact,
    "benchmark": run_benchmark,
    "sweep-lambda": run_sweep,
}


def run(cfg: RunConfig) -> ResultBundle:
    return RUNNERS[cfg.experiment](cfg)


# --------------------------------------------------------------------------
# argument parsing


def _parser():
    p = argparse.ArgumentParser(prog="plqt", description="Pseudo-Lindblad quantum trajectory runs.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", help="flat key=value file")
    p.add_argument("--n-traj", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--t-final", type=float)
    p.add_argument("--record-every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--lambda-mode")
    p.add_argument("--rate-policy")
    p.add_argument("--system")
    p.add_argument("--dims")
    p.add_argument("--reps", type=int)
    p.add_argument("--output", dest="output_path")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        file_values = read_config_file(args.config) if args.config else {}
        overrides = {k: v for k, v in vars(args).items() if k not in ("experiment", "config", "set")}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set {item!r}: expected KEY=VALUE")
            k, v = item.split("=", 1)
            overrides[k] = v
        cfg = build_config(args.experiment, file_values, overrides)
        if cfg.experiment not in ("benchmark", "sweep-lambda"):
            cfg.grid()
    except (ConfigError, OSError, configparser.Error) as exc:
        print(f"plqt: configuration error: {exc}", file=sys.stderr)
        return 2
    try:
        bundle = run(cfg)
    except Exception as exc:  # report and fail; the message carries the time stamp
        print(f"plqt: {cfg.experiment} failed: {exc}", file=sys.stderr)
        return 1
    for path in write_bundle(bundle, cfg.output_path):
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
