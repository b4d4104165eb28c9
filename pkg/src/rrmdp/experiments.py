"""Declarative experiment runner: configs, dataset cache, result CSVs and manifests."""
from __future__ import annotations

import hashlib
import json
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import duals
from .duals import AlphaSearchConfig
from .environments import (HardInstanceParams, build_environment, build_hard_instance, check_hard_instance,
                           exercise_behavior_policy, perturb_simulated_linear_mdp, random_sign_pattern,
                           uniform_behavior_policy)
from .evaluation import exact_value, mc_return, suboptimality
from .mdp_core import DivergenceSpec, OfflineDataset, collect_dataset, write_keyvalue
from .solvers import solve

KINDS = ("robustness-curve", "lambda-sweep", "rho-lambda-compare", "timing-vs-N", "timing-vs-d", "hardness",
         "dualcheck")
RESULT_COLUMNS = ("metric", "env", "algo", "divergence", "lambda", "rho", "K", "seed", "perturbation", "value",
                  "stderr")
TIMING_COLUMNS = RESULT_COLUMNS + ("d", "rep")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AlgoSpec:
    name: str
    beta: float
    gamma: float
    divergence: Optional[str] = None
    lam: Optional[float] = None
    rho: Optional[float] = None

    @property
    def label(self) -> str:
        if self.name == "R2PVI":
            return f"R2PVI-{self.divergence}(lambda={self.lam:g})"
        if self.name in ("DRPVI", "DRVI-L"):
            return f"{self.name}(rho={self.rho:g})"
        return self.name

    def divergence_spec(self) -> Optional[DivergenceSpec]:
        if self.name != "R2PVI":
            return None
        return DivergenceSpec(self.divergence, self.lam)


@dataclass
class ExperimentConfig:
    kind: str
    env: dict
    algorithms: list
    K: list
    seeds: list
    perturbations: list = field(default_factory=lambda: [0.0])
    behavior: str = "uniform"
    evaluation: dict = field(default_factory=lambda: {"mode": "exact-dp"})
    search: AlphaSearchConfig = field(default_factory=AlphaSearchConfig)
    output_dir: str = "results"
    workers: int = 1
    d_list: list = field(default_factory=list)
    repeats: int = 5
    trials: int = 1000
    raw: dict = field(default_factory=dict)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True, default=str).encode()).hexdigest()


def _num(value, name, positive=True, allow_zero=False):
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    if positive and not (x > 0 or (allow_zero and x == 0)):
        raise ConfigError(f"{name} must be {'non-negative' if allow_zero else 'positive'}, got {x}")
    return x


def parse_algorithm(entry: dict) -> AlgoSpec:
    name = entry.get("name")
    if name not in ("PEVI", "R2PVI", "DRPVI", "DRVI-L"):
        raise ConfigError(f"unknown algorithm {name!r}")
    beta = _num(entry.get("beta", 1.0), f"{name}.beta", allow_zero=True)
    gamma = _num(entry.get("gamma", 0.1), f"{name}.gamma")
    if name == "R2PVI":
        div = entry.get("divergence")
        if div not in ("TV", "KL", "Chi2"):
            raise ConfigError(f"R2PVI divergence must be TV, KL or Chi2, got {div!r}")
        return AlgoSpec(name, beta, gamma, div, _num(entry.get("lambda"), "R2PVI.lambda"))
    if name == "DRPVI":
        rho = _num(entry.get("rho"), "DRPVI.rho", allow_zero=True)
        if rho >= 1:
            raise ConfigError(f"DRPVI.rho must lie in [0, 1), got {rho}")
        return AlgoSpec(name, beta, gamma, rho=rho)
    if name == "DRVI-L":
        return AlgoSpec(name, beta, gamma, rho=_num(entry.get("rho"), "DRVI-L.rho"))
    return AlgoSpec(name, beta, gamma)


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    kind = raw.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {KINDS}")
    if kind == "dualcheck":
        return ExperimentConfig(kind=kind, env={}, algorithms=[], K=[], seeds=[int(raw.get("seed", 0))],
                                trials=int(raw.get("trials", 1000)), output_dir=raw.get("output_dir", "results"),
                                raw=raw)
    algos = [parse_algorithm(a) for a in raw.get("algorithms") or []]
    if not algos:
        raise ConfigError("algorithm list is empty")
    seeds = [int(s) for s in raw.get("seeds") or []]
    if not seeds:
        raise ConfigError("seed list is empty")
    Ks = [int(k) for k in raw.get("K") or []]
    if not Ks or min(Ks) < 0:
        raise ConfigError("K must be a non-empty list of non-negative integers")
    env = dict(raw.get("env") or {})
    if "builder" not in env:
        raise ConfigError("env.builder is required")
    search = AlphaSearchConfig(**(raw.get("search") or {}))
    evaluation = dict(raw.get("evaluation") or {"mode": "exact-dp"})
    if evaluation.get("mode") not in ("exact-dp", "mc"):
        raise ConfigError(f"evaluation.mode must be exact-dp or mc, got {evaluation.get('mode')!r}")
    if evaluation["mode"] == "mc" and int(evaluation.get("n_episodes", 10000)) < 1:
        raise ConfigError("evaluation.n_episodes must be positive")
    behavior = raw.get("behavior", "uniform")
    if behavior not in ("uniform", "exercise"):
        raise ConfigError(f"behavior must be uniform or exercise, got {behavior!r}")
    cfg = ExperimentConfig(kind=kind, env=env, algorithms=algos, K=Ks, seeds=seeds,
                           perturbations=[float(q) for q in raw.get("perturbations", [0.0])],
                           behavior=behavior, evaluation=evaluation, search=search,
                           output_dir=str(raw.get("output_dir", "results")), workers=int(raw.get("workers", 1)),
                           d_list=[int(d) for d in raw.get("d_list", [])], repeats=int(raw.get("repeats", 5)),
                           raw=raw)
    _check_cells(cfg)
    return cfg


def _check_cells(cfg: ExperimentConfig):
    if cfg.kind == "hardness":
        H, d = int(cfg.env.get("H", 3)), int(cfg.env.get("d", 4))
        for a in cfg.algorithms:
            if a.name != "R2PVI":
                raise ConfigError(f"hardness cells need R2PVI, got {a.label}")
            for K in cfg.K:
                p = HardInstanceParams(xi=np.ones((H, d)), K=K, lam=a.lam, divergence=a.divergence)
                try:
                    check_hard_instance(p)
                except ValueError as err:
                    raise ConfigError(f"cell (algo={a.label}, K={K}): {err}")
    if cfg.kind == "timing-vs-d" and not cfg.d_list:
        raise ConfigError("timing-vs-d needs a non-empty d_list")
    if cfg.kind in ("robustness-curve", "lambda-sweep", "rho-lambda-compare"):
        builder = cfg.env["builder"]
        for q in cfg.perturbations:
            if builder == "simulated_linear_mdp" and not 0 <= q < 1:
                raise ConfigError(f"perturbation q = {q} outside [0, 1)")
            if builder == "american_put" and not 0 < q < 1:
                raise ConfigError(f"american_put perturbation is the test p0 and must lie in (0, 1), got {q}")


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as err:
            raise ConfigError(f"cannot parse {path}: {err}")
    return parse_config(raw)


# ---------------------------------------------------------------------------
# datasets


def behavior_policy(env, kind: str):
    return exercise_behavior_policy(env) if kind == "exercise" else uniform_behavior_policy(env)


def cached_dataset(env, behavior: str, K: int, seed: int, cache_dir=None) -> OfflineDataset:
    """Collect, or load from ``cache_dir`` when an identical request was served before."""
    if cache_dir is None:
        return collect_dataset(env, behavior_policy(env, behavior), K, seed)
    key = json.dumps({"env": env.params, "behavior": behavior, "K": K, "seed": seed}, sort_keys=True, default=str)
    path = Path(cache_dir) / f"{hashlib.sha256(key.encode()).hexdigest()[:20]}.csv"
    if path.exists():
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                data = OfflineDataset.from_csv(path)
        except (ValueError, KeyError, OSError):
            data = None
        if data is not None and data.meta.get("digest") == data.digest():
            return data
    data = collect_dataset(env, behavior_policy(env, behavior), K, seed)
    data = OfflineDataset(data.states, data.actions, data.rewards, data.next_states, data.source_seed,
                          {**data.meta, "behavior": behavior, "digest": data.digest()})
    data.to_csv(path)
    return data


def perturbed_env(env, q: float):
    builder = env.params.get("builder")
    if builder == "simulated_linear_mdp":
        return perturb_simulated_linear_mdp(env, q) if q > 0 else env
    if builder == "american_put":
        return build_environment({**env.params, "p0": q})
    return env


# ---------------------------------------------------------------------------
# result rows


def _fmt(x):
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_rows(path, rows, columns=RESULT_COLUMNS):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row.get(c)) for c in columns) + "\n")


def read_rows(path):
    with open(path) as f:
        header = f.readline().strip().split(",")
        return [dict(zip(header, line.rstrip("\n").split(","))) for line in f if line.strip()]


def write_manifest(path, cfg: ExperimentConfig, cells, started, rows):
    entries = {"kind": cfg.kind, "config_hash": cfg.config_hash(), "rows": rows,
               "started_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
               "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S")}
    for i, (label, ms) in enumerate(cells):
        entries[f"cell.{i}"] = f"{label} wallclock_ms={ms:.3f}"
    write_keyvalue(path, entries)


def _row(metric, env_name, algo: AlgoSpec, K, seed, q, value, stderr=None):
    return {"metric": metric, "env": env_name, "algo": algo.name, "divergence": algo.divergence or "",
            "lambda": algo.lam, "rho": algo.rho, "K": K, "seed": seed, "perturbation": q,
            "value": float(value), "stderr": stderr}


# ---------------------------------------------------------------------------
# curves and sweeps


def _return_cells(args):
    cfg, algo_idx, K, seed = args
    algo = cfg.algorithms[algo_idx]
    env = build_environment(cfg.env)
    cache = Path(cfg.output_dir) / "cache"
    data = cached_dataset(env, cfg.behavior, K, seed, cache)
    t0 = time.perf_counter()
    out = solve(algo.name, data, env, algo.beta, algo.gamma, algo.divergence_spec(), algo.rho, cfg.search)
    solve_ms = (time.perf_counter() - t0) * 1e3
    rows, cells = [], []
    for q in cfg.perturbations:
        t1 = time.perf_counter()
        test_env = perturbed_env(env, q)
        if cfg.evaluation["mode"] == "mc":
            n = int(cfg.evaluation.get("n_episodes", 10000))
            value, stderr = mc_return(test_env, out.policy, n, seed)
        else:
            value = exact_value(test_env, out.policy).initial(test_env.initial_dist) * test_env.reward_scale
            stderr = 0.0
        rows.append(_row("return", env.name, algo, K, seed, q, value, stderr))
        cells.append((f"{algo.label} K={K} seed={seed} q={q:g}",
                      solve_ms + (time.perf_counter() - t1) * 1e3))
    return rows, cells


def _map(fn, jobs, workers):
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def run_experiment(cfg: ExperimentConfig):
    """Run every cell of ``cfg``; writes ``results.csv`` and ``manifest.txt`` into the output dir.

    Returns the list of result rows.
    """
    if cfg.kind in ("timing-vs-N", "timing-vs-d"):
        return bench_timing(cfg)
    if cfg.kind == "hardness":
        return run_hardness(cfg)
    if cfg.kind == "dualcheck":
        return run_dualcheck(cfg.trials, cfg.seeds[0])
    started = time.time()
    jobs = [(cfg, i, K, seed) for i in range(len(cfg.algorithms)) for K in cfg.K for seed in cfg.seeds]
    results = _map(_return_cells, jobs, cfg.workers)
    rows = [r for rs, _ in results for r in rs]
    cells = [c for _, cs in results for c in cs]
    out = Path(cfg.output_dir)
    write_rows(out / "results.csv", rows)
    write_manifest(out / "manifest.txt", cfg, cells, started, len(rows))
    return rows


# ---------------------------------------------------------------------------
# hardness


def _hardness_cells(args):
    cfg, algo_idx, K, seed = args
    algo = cfg.algorithms[algo_idx]
    H, d = int(cfg.env.get("H", 3)), int(cfg.env.get("d", 4))
    xi = random_sign_pattern(H, d, seed)
    p = HardInstanceParams(xi=xi, K=K, lam=algo.lam, divergence=algo.divergence)
    env, _, data = build_hard_instance(p, seed)
    t0 = time.perf_counter()
    div = algo.divergence_spec()
    out = solve("R2PVI", data, env, algo.beta, algo.gamma, div, None, cfg.search)
    gap = suboptimality(env, out.policy, div)
    ms = (time.perf_counter() - t0) * 1e3
    return _row("suboptimality", env.name, algo, K, seed, 0.0, gap, 0.0), (f"{algo.label} K={K} seed={seed}", ms)


def run_hardness(cfg: ExperimentConfig):
    started = time.time()
    jobs = [(cfg, i, K, seed) for i in range(len(cfg.algorithms)) for K in cfg.K for seed in cfg.seeds]
    results = _map(_hardness_cells, jobs, cfg.workers)
    rows = [r for r, _ in results]
    out = Path(cfg.output_dir)
    write_rows(out / "results.csv", rows)
    write_manifest(out / "manifest.txt", cfg, [c for _, c in results], started, len(rows))
    return rows


# ---------------------------------------------------------------------------
# timing


def time_solver(algo: AlgoSpec, data, env, search, repeats: int = 5):
    """Solver wall-clock in ms for ``repeats`` runs after one warm-up, single-threaded."""
    times = []
    with threadpool_limits(limits=1):
        solve(algo.name, data, env, algo.beta, algo.gamma, algo.divergence_spec(), algo.rho, search)
        for _ in range(repeats):
            t0 = time.perf_counter()
            solve(algo.name, data, env, algo.beta, algo.gamma, algo.divergence_spec(), algo.rho, search)
            times.append((time.perf_counter() - t0) * 1e3)
    return times


def bench_timing(cfg: ExperimentConfig):
    """Timing rows: one per repetition (rep 0..R-1) plus a ``mean`` row per (algo, N or d)."""
    started = time.time()
    if cfg.kind == "timing-vs-d":
        points = [(d, K) for d in cfg.d_list for K in cfg.K]
    else:
        points = [(int(cfg.env.get("d", 0)) or None, K) for K in cfg.K]
    rows, cells = [], []
    seed = cfg.seeds[0]
    for d, K in points:
        env_spec = dict(cfg.env)
        if d is not None:
            env_spec["d"] = d
        env = build_environment(env_spec)
        data = cached_dataset(env, cfg.behavior, K, seed, Path(cfg.output_dir) / "cache")
        for algo in cfg.algorithms:
            times = time_solver(algo, data, env, cfg.search, cfg.repeats)
            for rep, ms in enumerate(times):
                r = _row("wallclock_ms", env.name, algo, K, seed, 0.0, ms)
                r.update(d=d if d is not None else env.d, rep=rep)
                rows.append(r)
            mean = float(np.mean(times))
            r = _row("wallclock_ms", env.name, algo, K, seed, 0.0, mean,
                     float(np.std(times, ddof=1) / np.sqrt(len(times))) if len(times) > 1 else 0.0)
            r.update(d=d if d is not None else env.d, rep="mean")
            rows.append(r)
            cells.append((f"{algo.label} d={d} K={K}", float(np.sum(times))))
    out = Path(cfg.output_dir)
    write_rows(out / "results.csv", rows, TIMING_COLUMNS)
    write_manifest(out / "manifest.txt", cfg, cells, started, len(rows))
    return rows


# ---------------------------------------------------------------------------
# dual certification


@dataclass
class DualcheckReport:
    trials: int
    oracle_error: dict
    generic_error: dict
    bound_violation: float
    seconds: float
    rejected: Optional[str] = None

    @property
    def passed(self) -> bool:
        if self.rejected:
            return False
        ok = all(self.oracle_error[k] <= duals.DUALCHECK_TOLERANCE[k] for k in self.oracle_error)
        ok &= all(v <= duals.GENERIC_TOLERANCE for v in self.generic_error.values())
        return ok and self.bound_violation <= 1e-9

    def table(self) -> str:
        if self.rejected:
            return f"dualcheck: rejected input: {self.rejected}"
        lines = [f"{'divergence':<10} {'oracle max err':>15} {'tol':>8} {'generic max err':>16} {'tol':>8}  status"]
        for k in ("TV", "KL", "Chi2"):
            o, g = self.oracle_error[k], self.generic_error[k]
            ok = o <= duals.DUALCHECK_TOLERANCE[k] and g <= duals.GENERIC_TOLERANCE
            lines.append(f"{k:<10} {o:>15.3e} {duals.DUALCHECK_TOLERANCE[k]:>8.0e} {g:>16.3e} "
                         f"{duals.GENERIC_TOLERANCE:>8.0e}  {'PASS' if ok else 'FAIL'}")
        lines.append(f"bounds violation {self.bound_violation:.3e}; {self.trials} trials in {self.seconds:.1f}s")
        return "\n".join(lines)


def run_dualcheck(trials: int, seed: int, corrupt_lambda: bool = False) -> DualcheckReport:
    """Certify the TV/KL/chi-square duals against the primal oracle on random instances.

    ``corrupt_lambda`` flips the sign of every lambda; the suite must then report
    the input as rejected instead of producing numbers.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    t0 = time.perf_counter()
    instances = duals.random_instances(trials, seed)
    if corrupt_lambda:
        instances = [(m, v, -lam) for m, v, lam in instances]
    try:
        res = duals.certification_suite(instances)
    except ValueError as err:
        return DualcheckReport(trials, {}, {}, 0.0, time.perf_counter() - t0, rejected=str(err))
    return DualcheckReport(trials, res["oracle"], res["generic"], res["bounds"], time.perf_counter() - t0)
