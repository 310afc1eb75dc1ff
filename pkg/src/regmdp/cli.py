"""Command-line entry point: ``regmdp {generate,oracle,solve,experiment,sweep}``.

Exit codes: 0 success, 2 a run did not converge, 3 numerical divergence,
4 I/O or configuration error. Relative output paths are resolved against
``$REGMDP_OUTPUT_ROOT`` when it is set.
"""
from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import experiments, io
from .errors import MaxIterExceededError, NonFiniteStateError, RegMDPError, ValidationError
from .mdp import generate_random_mdp
from .solvers import SolverConfig, SolverState, Variant, run_solver

EXIT_OK, EXIT_NOT_CONVERGED, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "REGMDP_OUTPUT_ROOT"

log = logging.getLogger("regmdp")


def out_path(p) -> Path:
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=1) + "\n")


def cmd_generate(args) -> int:
    mdp = generate_random_mdp(args.states, args.actions, args.support, args.seed, discount=args.gamma)
    io.save_mdp(mdp, out_path(args.output), sparse=not args.dense)
    emit(dict(io.mdp_summary(mdp), seed=args.seed, path=str(out_path(args.output))))
    return EXIT_OK


def cmd_oracle(args) -> int:
    mdp = io.load_mdp(args.mdp)
    weight = None
    if args.weight:
        weight = json.loads(Path(args.weight).read_text())
    from .oracle import solve_oracle
    sol = solve_oracle(mdp, args.tau, args.alpha, weight=weight, tol=args.tol, max_iter=args.max_iter)
    io.save_oracle(sol, out_path(args.output), io.mdp_digest(mdp))
    res = experiments.oracle_residuals(mdp, sol)
    emit({"path": str(out_path(args.output)), "vi_iterations": sol.iterations,
          "vi_residual": sol.residual, "v_star_min": float(sol.v_star.min()),
          "v_star_max": float(sol.v_star.max()), "residual_standard": res["standard"],
          "residual_quadratic": res["quadratic"]})
    return EXIT_OK


def cmd_solve(args) -> int:
    mdp = io.load_mdp(args.mdp)
    sol = io.load_oracle(args.oracle) if args.oracle else None
    tau = args.tau if args.tau is not None else (sol.tau if sol else None)
    alpha = args.alpha if args.alpha is not None else (sol.alpha if sol else None)
    if tau is None or alpha is None:
        raise ValidationError("--tau and --alpha are required without an oracle file")
    if sol is not None and (sol.tau != tau or sol.alpha != alpha):
        raise ValidationError("oracle was computed for a different (tau, alpha)")
    variant = Variant(args.variant)
    c = args.c if args.c is not None else (0.98 if variant is Variant.INGAD else 0.0)
    cfg = SolverConfig(alpha=alpha, tau=tau, eta=args.eta, c=c, eps_tol=args.eps_tol,
                       max_iter=args.max_iter, record_every=args.record_every)
    if args.init_from_oracle:
        if sol is None:
            raise ValidationError("--init-from-oracle needs --oracle")
        init = SolverState.from_oracle(sol)
    else:
        init = SolverState.zeros(mdp.num_states, mdp.num_actions)
    t0 = time.perf_counter()
    trace = run_solver(mdp, cfg, init, variant, sol)
    log.info("solve finished in %.1fs", time.perf_counter() - t0)
    csv_path = out_path(args.output)
    io.save_trace(trace, csv_path)
    summary = experiments.summarize(trace, mdp_sha256=io.mdp_digest(mdp))
    io.atomic_write(csv_path.with_name(csv_path.stem + ".summary.json"), io.dumps(summary))
    emit(summary)
    return EXIT_OK if trace.converged else EXIT_NOT_CONVERGED


def _experiment_config(args) -> experiments.ExperimentConfig:
    d = {}
    if args.config:
        d = json.loads(Path(args.config).read_text())
    if args.exp:
        d["exp"] = args.exp
    if args.seeds:
        d.setdefault("instance", {})["seeds"] = args.seeds
    for flag, key in (("states", "num_states"), ("actions", "num_actions"),
                      ("support", "support"), ("gamma", "gamma")):
        if getattr(args, flag) is not None:
            d.setdefault("instance", {})[key] = getattr(args, flag)
    if args.buffer_size is not None:
        d.setdefault("buffer", {})["n_samples"] = args.buffer_size
    if args.batch_size is not None:
        d.setdefault("buffer", {})["batch_size"] = args.batch_size
    if args.full_scale:
        d.setdefault("buffer", {}).update(experiments.FULL_SCALE_BUFFER)
    if args.record_every is not None:
        d["record_every"] = args.record_every
    if args.jobs is not None:
        d["jobs"] = args.jobs
    d["output_dir"] = str(out_path(args.output or d.get("output_dir", "results")))
    return experiments.ExperimentConfig.from_dict(d)


def cmd_experiment(args) -> int:
    cfg = _experiment_config(args)
    report = experiments.run_experiment(cfg)
    emit({"report": str(Path(cfg.output_dir) / "report.json"), "summary": report["summary"]})
    if any(r["status"] == "diverged" for r in report["runs"]):
        return EXIT_DIVERGED
    if cfg.exp in ("exp1", "custom") and not all(r["converged"] for r in report["runs"]):
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_sweep(args) -> int:
    mdp = io.load_mdp(args.mdp)
    sol = io.load_oracle(args.oracle) if args.oracle else None
    tau = args.tau if args.tau is not None else (sol.tau if sol else None)
    alpha = args.alpha if args.alpha is not None else (sol.alpha if sol else None)
    if tau is None or alpha is None:
        raise ValidationError("--tau and --alpha are required without an oracle file")
    rows, best = experiments.sweep(mdp, sol, args.etas, args.cs, args.variant, alpha=alpha, tau=tau,
                                   eps_tol=args.eps_tol, max_iter=args.max_iter)
    buf = _io.StringIO()
    cols = ["variant", "c", "eta", "status", "iterations", "final_q", "final_policy_error",
            "largest_stable"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        flag = best[str(r["c"])]["largest_stable_eta"] == r["eta"]
        w.writerow([r["variant"], io.fmt_float(r["c"]), io.fmt_float(r["eta"]), r["status"],
                    "" if r["iterations"] is None else r["iterations"], io.fmt_float(r["final_q"]),
                    io.fmt_float(r["final_policy_error"]), int(flag)])
    io.atomic_write(out_path(args.output), buf.getvalue())
    emit({"path": str(out_path(args.output)), "by_c": best})
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors, not argparse's default exit 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_IO, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="regmdp", description="Natural gradient solvers for entropy-regularized MDPs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a random MDP instance")
    g.add_argument("--states", type=int, default=200)
    g.add_argument("--actions", type=int, default=50)
    g.add_argument("--support", type=int, default=20)
    g.add_argument("--gamma", type=float, default=0.99)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dense", action="store_true", help="store the dense transition tensor")
    g.add_argument("-o", "--output", default="mdp.json")
    g.set_defaults(func=cmd_generate)

    o = sub.add_parser("oracle", help="soft value iteration ground truth and optimal duals")
    o.add_argument("mdp")
    o.add_argument("--tau", type=float, default=0.01)
    o.add_argument("--alpha", type=float, default=0.1)
    o.add_argument("--tol", type=float, default=None)
    o.add_argument("--max-iter", type=int, default=1_000_000)
    o.add_argument("--weight", help="JSON list with the weight vector e (default all ones)")
    o.add_argument("-o", "--output", default="oracle.json")
    o.set_defaults(func=cmd_oracle)

    s = sub.add_parser("solve", help="run NGAD or INGAD and write a trace")
    s.add_argument("mdp")
    s.add_argument("--oracle")
    s.add_argument("--variant", choices=[v.value for v in Variant], default="INGAD")
    s.add_argument("--alpha", type=float)
    s.add_argument("--tau", type=float)
    s.add_argument("--eta", type=float, default=8e-3)
    s.add_argument("--c", type=float, default=None, help="metric coefficient (INGAD default 0.98)")
    s.add_argument("--eps-tol", type=float, default=1e-5)
    s.add_argument("--max-iter", type=int, default=200_000)
    s.add_argument("--record-every", type=int, default=10)
    s.add_argument("--init-from-oracle", action="store_true")
    s.add_argument("-o", "--output", default="trace.csv")
    s.set_defaults(func=cmd_solve)

    e = sub.add_parser("experiment", help="run exp1, exp2, exp3 or a custom config")
    e.add_argument("config", nargs="?", help="JSON experiment config; flags override it")
    e.add_argument("--exp", choices=sorted(experiments.PRESETS))
    e.add_argument("--seeds", type=int, nargs="+")
    e.add_argument("--states", type=int)
    e.add_argument("--actions", type=int)
    e.add_argument("--support", type=int)
    e.add_argument("--gamma", type=float)
    e.add_argument("--buffer-size", type=int)
    e.add_argument("--batch-size", type=int)
    e.add_argument("--full-scale", action="store_true", help="exp3 with N=1e8, N_b=1e5")
    e.add_argument("--record-every", type=int)
    e.add_argument("--jobs", type=int)
    e.add_argument("-o", "--output")
    e.set_defaults(func=cmd_experiment)

    w = sub.add_parser("sweep", help="eta x c grid with divergence detection")
    w.add_argument("mdp")
    w.add_argument("--oracle")
    w.add_argument("--variant", choices=[v.value for v in Variant], default="INGAD")
    w.add_argument("--etas", type=float, nargs="+", required=True)
    w.add_argument("--cs", type=float, nargs="+", default=[0.0])
    w.add_argument("--alpha", type=float)
    w.add_argument("--tau", type=float)
    w.add_argument("--eps-tol", type=float, default=1e-5)
    w.add_argument("--max-iter", type=int, default=5000)
    w.add_argument("-o", "--output", default="sweep.csv")
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteStateError as exc:
        log.error("%s", exc)
        return EXIT_DIVERGED
    except MaxIterExceededError as exc:
        log.error("%s", exc)
        return EXIT_NOT_CONVERGED
    except (OSError, ValueError, KeyError, RegMDPError) as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
