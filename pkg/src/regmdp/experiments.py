"""Experiment configurations and orchestration for the CLI.

Everything numeric is delegated to the library modules; this file only wires
runs together and aggregates their traces (max, median, ratios).
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from . import io
from .errors import NonFiniteStateError, ValidationError
from .mdp import MdpModel, generate_random_mdp
from .objective import first_order_residual, first_order_residual_standard
from .oracle import OracleSolution, solve_oracle
from .sampling import NoiseConfig, collect_buffer, run_noisy_reward_ingad, run_sample_based_ingad
from .solvers import SolverConfig, SolverState, SolverTrace, Variant, run_solver

log = logging.getLogger(__name__)

REPORT_SCHEMA = "regmdp.report/1"
LYAPUNOV_RISE_TOL = 1e-8

PRESETS = {
    "exp1": {
        "instance": {"num_states": 200, "num_actions": 50, "support": 20, "gamma": 0.99,
                     "seeds": [0, 1, 2]},
        "oracle": {"tau": 0.01, "alpha": 0.1},
        "solvers": [
            {"variant": "NGAD", "eta": 3e-4, "c": 0.0, "eps_tol": 1e-5, "max_iter": 200_000},
            {"variant": "INGAD", "eta": 8e-3, "c": 0.98, "eps_tol": 1e-5, "max_iter": 200_000},
        ],
    },
    "exp2": {
        "instance": {"num_states": 200, "num_actions": 50, "support": 20, "gamma": 0.99,
                     "seeds": [0, 1, 2]},
        "oracle": {"tau": 0.1, "alpha": 0.1},
        "solvers": [{"variant": "INGAD", "eta": 0.01, "c": 0.9, "eps_tol": 1e-5, "max_iter": 3000}],
        "noise": {"sigmas": [0.1, 0.2], "seed": 1000},
    },
    "exp3": {
        "instance": {"num_states": 200, "num_actions": 50, "support": 20, "gamma": 0.9,
                     "seeds": [0]},
        "oracle": {"tau": 0.1, "alpha": 0.1},
        "solvers": [{"variant": "INGAD", "eta": 1e-3, "c": 0.9, "eps_tol": 1e-5, "max_iter": 12_000}],
        "buffer": {"n_samples": 10_000_000, "batch_size": 10_000, "seed": 2000,
                   "fallback": "fallback_buffer"},
    },
    "custom": {
        "instance": {"num_states": 20, "num_actions": 5, "support": 5, "gamma": 0.9, "seeds": [0]},
        "oracle": {"tau": 0.1, "alpha": 0.1},
        "solvers": [{"variant": "INGAD", "eta": 0.01, "c": 0.9, "eps_tol": 1e-8, "max_iter": 100_000}],
    },
}
# Opt-in long-running profile with 10x larger buffer and batches.
FULL_SCALE_BUFFER = {"n_samples": 100_000_000, "batch_size": 100_000}


@dataclass
class ExperimentConfig:
    exp: str
    instance: dict
    oracle: dict
    solvers: list
    noise: dict | None = None
    buffer: dict | None = None
    output_dir: str = "results"
    record_every: int = 10
    report_format: str = "json"
    jobs: int = 1
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.exp not in PRESETS:
            raise ValidationError(f"unknown experiment {self.exp!r}")
        if self.exp == "exp2" and not self.noise:
            raise ValidationError("exp2 needs a noise spec")
        if self.exp == "exp3" and not self.buffer:
            raise ValidationError("exp3 needs a buffer spec")
        if not self.solvers:
            raise ValidationError("at least one solver spec is required")
        for spec in self.solvers:
            Variant(spec.get("variant", "INGAD"))
        if self.report_format != "json":
            raise ValidationError("only the json report format is supported")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        exp = d.pop("exp", "custom")
        if exp not in PRESETS:
            raise ValidationError(f"unknown experiment {exp!r}")
        merged = _deep_merge(copy.deepcopy(PRESETS.get(exp, {})), d)
        known = {f for f in cls.__dataclass_fields__ if f not in ("exp", "extra")}
        extra = {k: merged.pop(k) for k in list(merged) if k not in known}
        return cls(exp=exp, extra=extra, **merged)

    def to_dict(self) -> dict:
        return {"exp": self.exp, "instance": self.instance, "oracle": self.oracle,
                "solvers": self.solvers, "noise": self.noise, "buffer": self.buffer,
                "output_dir": self.output_dir, "record_every": self.record_every,
                "report_format": self.report_format}

    def solver_config(self, spec: dict) -> SolverConfig:
        fields = {k: v for k, v in spec.items() if k != "variant"}
        fields.setdefault("record_every", self.record_every)
        return SolverConfig(alpha=self.oracle["alpha"], tau=self.oracle["tau"], **fields)


def _deep_merge(base: dict, over: dict) -> dict:
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            base[k] = _deep_merge(base[k], v)
        else:
            base[k] = v
    return base


def build_instance(inst: dict, seed: int) -> MdpModel:
    return generate_random_mdp(inst["num_states"], inst["num_actions"], inst["support"], seed,
                               discount=inst["gamma"])


def oracle_key(mdp_sha: str, tau: float, alpha: float, weight, tol, seed) -> str:
    payload = json.dumps({"mdp": mdp_sha, "tau": tau, "alpha": alpha,
                          "weight": None if weight is None else list(map(float, weight)),
                          "tol": tol, "seed": seed}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def cached_oracle(mdp: MdpModel, tau: float, alpha: float, cache_dir, weight=None, tol=None,
                  seed=None) -> OracleSolution:
    """Solve or reuse ground truth stored under ``cache_dir``."""
    sha = io.mdp_digest(mdp)
    path = Path(cache_dir) / f"oracle_{oracle_key(sha, tau, alpha, weight, tol, seed)}.json"
    if path.exists():
        return io.load_oracle(path)
    sol = solve_oracle(mdp, tau, alpha, weight=weight, tol=tol)
    io.save_oracle(sol, path, sha)
    return sol


def oracle_residuals(mdp: MdpModel, sol: OracleSolution) -> dict:
    return {"standard": first_order_residual_standard(mdp, sol.tau, sol.weight, sol.v_star, sol.u_circ),
            "quadratic": first_order_residual(mdp, sol.tau, sol.alpha, sol.v_star, sol.u_star)}


def monotone_fraction(values, rel_tol: float = LYAPUNOV_RISE_TOL) -> float:
    """Fraction of consecutive records where the value does not rise by more than ``rel_tol``."""
    x = np.asarray(values, dtype=float)
    if len(x) < 2:
        return 1.0
    ok = x[1:] <= x[:-1] + rel_tol * np.abs(x[:-1])
    return float(ok.mean())


def decile_ratio(values) -> float:
    """Median of the last 10% of records over the median of the first 10%."""
    x = np.asarray(values, dtype=float)
    n = max(1, len(x) // 10)
    return float(np.median(x[-n:]) / np.median(x[:n]))


def summarize(trace: SolverTrace, **labels) -> dict:
    L = trace.column("lyapunov")
    first, last = trace.records[0], trace.final
    row = dict(labels)
    row.update({"variant": trace.variant, "status": "converged" if trace.converged else "not_converged",
                "iterations": trace.iterations,
                "converged": trace.converged,
                "final_value_error": last.value_error, "final_policy_error": last.policy_error,
                "lyapunov_initial": first.lyapunov, "lyapunov_final": last.lyapunov,
                "monotone_fraction": monotone_fraction(L) if first.lyapunov is not None else None})
    if first.lyapunov is not None:
        row["lyapunov_decile_ratio"] = decile_ratio(L)
    return row


def _median(rows, key):
    vals = [r[key] for r in rows if r.get(key) is not None]
    return float(np.median(vals)) if vals else None


# Each task is a top-level function so it can run in a worker process.
def _task_exact(args):
    mdp, sol, variant, cfg, meta = args
    trace = run_solver(mdp, cfg, variant=variant, oracle=sol)
    trace.metadata.update(meta)
    return trace


def _task_noisy(args):
    mdp, sol, noise, cfg, meta = args
    trace = run_noisy_reward_ingad(mdp, noise, cfg, oracle=sol)
    trace.metadata.update(meta)
    return trace


def _task_sampled(args):
    mdp, sol, bspec, cfg, meta = args
    buf = collect_buffer(mdp, int(bspec["n_samples"]), int(bspec["seed"]) + meta["instance_seed"])
    trace = run_sample_based_ingad(mdp, buf, cfg, int(bspec["batch_size"]), oracle=sol,
                                   seed=int(bspec.get("batch_seed", bspec["seed"] + 1)) + meta["instance_seed"],
                                   fallback=bspec.get("fallback", "fallback_buffer"))
    trace.metadata.update(meta)
    return trace


def _guarded(fn, args):
    """Run one task; a diverging run yields its failure iteration instead of a trace."""
    try:
        return fn(args)
    except NonFiniteStateError as exc:
        return {"diverged_at": exc.iteration}


def _run_tasks(fn, tasks, jobs):
    fn = partial(_guarded, fn)
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Generate instances, solve oracles, run every solver spec and write the report directory."""
    out = Path(cfg.output_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    inst = cfg.instance
    tasks, names, labels = [], [], []
    fn = {"exp2": _task_noisy, "exp3": _task_sampled}.get(cfg.exp, _task_exact)
    for seed in inst["seeds"]:
        mdp = build_instance(inst, seed)
        io.save_mdp(mdp, out / "instances" / f"mdp_seed{seed}.json")
        sol = cached_oracle(mdp, cfg.oracle["tau"], cfg.oracle["alpha"], out / "oracle",
                            tol=cfg.oracle.get("tol"), seed=seed)
        for spec in cfg.solvers:
            variant = Variant(spec.get("variant", "INGAD"))
            scfg = cfg.solver_config(spec)
            meta = {"exp": cfg.exp, "instance_seed": seed}
            if cfg.exp == "exp2":
                for sigma in cfg.noise["sigmas"]:
                    noise = NoiseConfig(float(sigma), int(cfg.noise["seed"]) + seed)
                    tasks.append((mdp, sol, noise, scfg, dict(meta, sigma=float(sigma))))
                    names.append(f"{cfg.exp}_seed{seed}_{variant.value}_sigma{sigma}")
                    labels.append({"exp": cfg.exp, "seed": seed, "variant": variant.value, "sigma": float(sigma)})
            elif cfg.exp == "exp3":
                tasks.append((mdp, sol, cfg.buffer, scfg, meta))
                names.append(f"{cfg.exp}_seed{seed}_{variant.value}")
                labels.append({"exp": cfg.exp, "seed": seed, "variant": variant.value})
            else:
                tasks.append((mdp, sol, variant, scfg, meta))
                names.append(f"{cfg.exp}_seed{seed}_{variant.value}")
                labels.append({"exp": cfg.exp, "seed": seed, "variant": variant.value})
    traces = _run_tasks(fn, tasks, cfg.jobs)
    rows = []
    for name, lab, trace in zip(names, labels, traces):
        if isinstance(trace, dict):
            log.warning("%s diverged at iteration %s", name, trace["diverged_at"])
            rows.append(dict(lab, run=name, status="diverged",
                             iterations=trace["diverged_at"], converged=False,
                             final_value_error=None, final_policy_error=None,
                             monotone_fraction=None, lyapunov_decile_ratio=None))
            continue
        io.save_trace(trace, out / "runs" / f"{name}.csv")
        rows.append(summarize(trace, run=name, **lab))
    report = {"schema": REPORT_SCHEMA, "exp": cfg.exp, "config": cfg.to_dict(), "runs": rows,
              "summary": _aggregate(cfg, rows)}
    io.atomic_write(out / "report.json", io.dumps(report))
    return report


def _aggregate(cfg: ExperimentConfig, rows: list) -> dict:
    if cfg.exp == "exp1" or (cfg.exp == "custom" and {r["variant"] for r in rows} == {"NGAD", "INGAD"}):
        ratios = {}
        for seed in cfg.instance["seeds"]:
            it = {r["variant"]: r["iterations"] for r in rows if r["seed"] == seed and r["converged"]}
            if "NGAD" in it and "INGAD" in it:
                ratios[str(seed)] = it["NGAD"] / it["INGAD"]
        return {"iteration_ratio": ratios,
                "min_iteration_ratio": min(ratios.values()) if ratios else None,
                "all_converged": all(r["converged"] for r in rows),
                "diverged_runs": [r["run"] for r in rows if r["status"] == "diverged"],
                "min_monotone_fraction": min((r["monotone_fraction"] for r in rows
                                              if r["monotone_fraction"] is not None), default=None)}
    if cfg.exp == "exp2":
        by_sigma = {}
        for sigma in cfg.noise["sigmas"]:
            sub = [r for r in rows if r["sigma"] == float(sigma)]
            by_sigma[str(sigma)] = {"median_value_error": _median(sub, "final_value_error"),
                                    "median_policy_error": _median(sub, "final_policy_error"),
                                    "max_lyapunov_decile_ratio": max(
                                        (r["lyapunov_decile_ratio"] for r in sub
                                         if r["lyapunov_decile_ratio"] is not None), default=None)}
        return {"by_sigma": by_sigma, "diverged_runs": [r["run"] for r in rows if r["status"] == "diverged"]}
    return {"median_value_error": _median(rows, "final_value_error"),
            "median_policy_error": _median(rows, "final_policy_error"),
            "all_converged": all(r["converged"] for r in rows),
            "diverged_runs": [r["run"] for r in rows if r["status"] == "diverged"]}


def sweep(mdp: MdpModel, sol: OracleSolution | None, etas, cs, variant="INGAD", alpha=0.1, tau=0.01,
          eps_tol=1e-5, max_iter=5000) -> tuple[list, dict]:
    """Grid over ``eta x c``; a diverging cell is recorded and the sweep continues.

    Returns the per-cell rows and, for each ``c``, the largest stable ``eta``
    (no overflow within ``max_iter``) and the largest converged one.
    """
    variant = Variant(variant)
    rows = []
    for c in cs:
        for eta in etas:
            cfg = SolverConfig(alpha=alpha, tau=tau, eta=float(eta), c=float(c), eps_tol=eps_tol,
                               max_iter=max_iter, record_every=max_iter,
                               diagnostics={"policy_error", "value_error"} if sol else set())
            row = {"variant": variant.value, "c": float(c), "eta": float(eta)}
            try:
                trace = run_solver(mdp, cfg, SolverState.zeros(mdp.num_states, mdp.num_actions),
                                   variant, sol)
            except NonFiniteStateError as exc:
                row.update(status="diverged", iterations=exc.iteration, final_q=None,
                           final_policy_error=None)
            else:
                row.update(status="converged" if trace.converged else "not_converged",
                           iterations=trace.iterations, final_q=trace.final.q,
                           final_policy_error=trace.final.policy_error)
            rows.append(row)
    best = {}
    for c in cs:
        cell = [r for r in rows if r["c"] == float(c)]
        stable = [r["eta"] for r in cell if r["status"] != "diverged"]
        conv = [r["eta"] for r in cell if r["status"] == "converged"]
        best[str(float(c))] = {"largest_stable_eta": max(stable) if stable else None,
                               "largest_converged_eta": max(conv) if conv else None}
    return rows, best
