"""Command-line front end.

Exit codes: 0 when every check passed (or found no violation), 1 when a check
was violated and a witness was written, 2 on configuration or evaluation errors.
"""

from __future__ import annotations

import argparse
import sys as _sys
from pathlib import Path

import numpy as np

from . import __version__, benchmarks, config
from .bounds import check_iioss, falsify, run_norm_observer
from .compare import FLOW_SPEEDS, kl_bound, kl_table_csv, sufficiency_pipeline, verify_kl_bound
from .errors import ArgumentError, IIOSSLabError
from .funclib import PD, settling_time_map
from .lyap import check_sandwich, cross_check_forms, differential_samples
from .parallel import default_jobs
from .report import HOLDS, VIOLATED, CertificateReport, ComparisonReport, dumps
from .sim import integrate, random_runs
from .valfun import estimate_v0, estimates_csv

SUBCOMMANDS = (
    "simulate",
    "check-iioss",
    "falsify",
    "observe",
    "check-lyapunov",
    "sufficiency",
    "compare",
    "estimate-v0",
    "settle",
    "list-benchmarks",
)


class Run:
    """State shared by one subcommand invocation."""

    def __init__(self, args, cfg: dict):
        self.args = args
        self.cfg = cfg
        s = config.sampling(cfg)
        for key in ("seed", "budget", "dt", "horizon"):
            val = getattr(args, key, None)
            if val is not None:
                s[key] = val
        self.sampling = s
        cfg.setdefault("sampling", {}).update({k: s[k] for k in ("seed", "budget", "dt", "horizon")})
        if args.xi is not None:
            cfg.setdefault("inputs", {})["xi"] = args.xi
        _apply_model_flags(cfg, args)
        self.jobs = args.jobs or default_jobs()
        out = args.out_dir or cfg.get("outputs", {}).get("dir") or "iioss-out"
        self.out_dir = Path(out)
        self.format = args.format or cfg.get("outputs", {}).get("format", "json")
        self.reports: list = []
        self.files: dict = {}
        self.primary_csv: str | None = None

    def write(self, name: str, text: str) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / name).write_text(text, encoding="utf-8")
        self.files[name] = str(self.out_dir / name)

    def witness(self, rep: CertificateReport, name: str = "witness_input.json") -> None:
        if rep.violated and rep.witness_input is not None:
            self.write(name, dumps({"xi": rep.witness_xi, "time": rep.witness_time, "input": rep.witness_input}))

    def finish(self, subcommand: str) -> int:
        violated = any(
            (isinstance(r, CertificateReport) and r.violated) or (isinstance(r, ComparisonReport) and r.agree is False)
            for r in self.reports
        )
        payload = {
            "tool": "iioss-lab",
            "version": __version__,
            "subcommand": subcommand,
            "config_sha256": config.config_hash(self.cfg),
            "seed": self.sampling["seed"],
            "exit_code": 1 if violated else 0,
            "reports": [r.to_dict() for r in self.reports],
            "files": sorted(self.files),
        }
        text = dumps(payload)
        self.write("report.json", text)
        if self.format == "csv" and self.primary_csv is not None:
            _sys.stdout.write(self.primary_csv)
        else:
            _sys.stdout.write(text)
        return payload["exit_code"]


def _apply_model_flags(cfg: dict, args) -> None:
    """--dynamics/--output replace the system, --gain NAME=EXPR replaces one gain."""
    if args.dynamics:
        old = cfg.get("system") or {}
        cfg["system"] = {
            "dynamics": list(args.dynamics),
            "output": list(args.output) if args.output else ["x1"],
            "n": len(args.dynamics),
            "m": int(old.get("m", 1)),
        }
        cfg.pop("benchmark", None)
    elif args.output:
        spec = cfg.get("system")
        if not spec or "dynamics" not in spec:
            raise ArgumentError("--output needs --dynamics or an explicit system in the config")
        spec["output"] = list(args.output)
    for item in args.gain or ():
        name, sep, expr = item.partition("=")
        if not sep or not name.strip() or not expr.strip():
            raise ArgumentError(f"--gain expects NAME=EXPR, got {item!r}")
        gains = cfg.setdefault("gains", {})
        old = gains.get(name.strip())
        if isinstance(old, dict):
            gains[name.strip()] = {**old, "expr": expr.strip()}
        else:
            gains[name.strip()] = expr.strip()


def _xi(run: Run, n: int) -> np.ndarray:
    xi = run.cfg.get("inputs", {}).get("xi")
    if xi is None:
        return np.zeros(n)
    xi = np.atleast_1d(np.asarray(xi, float)).reshape(-1)
    if xi.size != n:
        raise ArgumentError(f"xi has {xi.size} entries, the system has {n} states")
    return xi


def _tol(run: Run):
    return run.sampling["tolerance"]


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(run: Run) -> None:
    sys = config.system(run.cfg)
    s = run.sampling
    u = config.input_signal(run.cfg.get("inputs", {}).get("u"), sys.m, s["horizon"])
    traj = integrate(sys, _xi(run, sys.n), u, s["dt"], s["horizon"])
    csv_text = traj.to_csv()
    run.write("trajectory.csv", csv_text)
    run.primary_csv = csv_text
    run.reports.append(
        CertificateReport(
            "simulate",
            VIOLATED if traj.diverged_at is not None else HOLDS,
            0.0,
            0.0,
            {"xi": traj.xi.tolist(), "input": u.to_dict(), "time": float(traj.times[-1])},
            1,
            details={"final_state": traj.states[-1].tolist(), "diverged_at": traj.diverged_at},
        )
    )


def cmd_check_iioss(run: Run) -> None:
    sys, gains, s = config.system(run.cfg), config.gains(run.cfg), run.sampling
    xis, sigs = random_runs(sys, int(s["samples"]), s["seed"], s["radius"], s["horizon"], s["amplitude"])
    rep = check_iioss(sys, gains, xis, sigs, s["dt"], s["horizon"], _tol(run), run.jobs)
    run.reports.append(rep)
    run.witness(rep)


def cmd_falsify(run: Run) -> None:
    sys, gains, s = config.system(run.cfg), config.gains(run.cfg), run.sampling
    rep = falsify(
        sys,
        gains,
        int(s["budget"]),
        s["seed"],
        s["radius"],
        s["dt"],
        s["horizon"],
        s["energy_budget"],
        s["amp_max"],
        tol=_tol(run),
        jobs=run.jobs,
    )
    run.reports.append(rep)
    run.witness(rep)


def cmd_observe(run: Run) -> None:
    sys, gains, s = config.system(run.cfg), config.gains(run.cfg), run.sampling
    u = config.input_signal(run.cfg.get("inputs", {}).get("u"), sys.m, s["horizon"])
    state, rep = run_norm_observer(sys, gains, _xi(run, sys.n), u, s["dt"], s["horizon"], _tol(run))
    lines = ["t,p"] + [f"{float(t)!r},{float(p)!r}" for t, p in zip(state.times, state.p)]
    run.primary_csv = "\n".join(lines) + "\n"
    run.write("observer.csv", run.primary_csv)
    run.reports.append(rep)
    run.witness(rep)


def cmd_check_lyapunov(run: Run) -> None:
    sys, cand, s = config.system(run.cfg), config.candidate(run.cfg), run.sampling
    X, U = differential_samples(sys, int(s["samples"]), s["x_box"], s["u_box"], s["seed"])
    run.reports.append(check_sandwich(cand, s["x_box"], int(s["samples"]), s["seed"]))
    tol = 1e-6 if _tol(run) is None else _tol(run)
    cross = cross_check_forms(cand, sys, (X, U), s["dt"], s["horizon"], tol)
    run.reports.append(cross)
    run.reports.append(
        CertificateReport(
            "decrease",
            VIOLATED if VIOLATED in cross.verdicts.values() else HOLDS,
            max(cross.details["differential_margin"], cross.details["integral_margin"]),
            tol,
            {},
            len(X),
            details=dict(cross.verdicts),
        )
    )


def cmd_sufficiency(run: Run) -> None:
    sys, cand, s = config.system(run.cfg), config.candidate(run.cfg), run.sampling
    xis, sigs = random_runs(sys, int(s["samples"]), s["seed"], s["radius"], s["horizon"], s["amplitude"])
    tol = 1e-4 if _tol(run) is None else _tol(run)
    bound, rep = sufficiency_pipeline(cand, sys, xis, sigs, s["dt"], s["horizon"], tol, seed=s["seed"], jobs=run.jobs)
    cap = bound.flow.domain_cap
    table = kl_table_csv(bound.flow, np.geomspace(cap * 1e-3, cap, 20), np.linspace(0.0, bound.flow.time_cap, 20))
    run.write("beta_table.csv", table)
    run.primary_csv = table
    run.reports.append(rep)
    run.witness(rep)


def cmd_compare(run: Run) -> None:
    spec = run.cfg.get("compare", {})
    alpha = config.gain(spec.get("alpha", {"expr": "s", "kind": PD}), PD)
    s = run.sampling
    count = int(spec.get("instances", 50))
    tol = 1e-4 if _tol(run) is None else _tol(run)
    if "beta" in spec:
        beta = config.kl(spec["beta"])
        rep = verify_kl_bound(beta, alpha, count, s["seed"], tol=tol)
    else:
        for speed in spec.get("speeds", FLOW_SPEEDS):
            beta = kl_bound(alpha, speed=speed)
            rep = verify_kl_bound(beta, alpha, count, s["seed"], tol=tol)
            rep.details["speed"] = speed
            if rep.passed:
                break
    cap = beta.domain_cap
    table = kl_table_csv(beta, np.geomspace(cap * 1e-3, cap, 20), np.linspace(0.0, beta.time_cap, 20))
    run.write("beta_table.csv", table)
    run.primary_csv = table
    run.reports.append(rep)
    run.witness(rep)


def cmd_estimate_v0(run: Run) -> None:
    sys, gains, s = config.system(run.cfg), config.gains(run.cfg), run.sampling
    sigma, weight = config.sigma(run.cfg), config.weight(run.cfg)
    inputs = run.cfg.get("inputs", {})
    if run.args.xi is not None or "xi_list" not in inputs:
        points = [_xi(run, sys.n)]
    else:
        points = [np.asarray(p, float).reshape(-1) for p in inputs["xi_list"]]
    dt = s["dt"]
    estimates = [estimate_v0(sys, gains, sigma, weight, p, int(s["budget"]), s["seed"], dt) for p in points]
    table = estimates_csv(estimates)
    run.write("v0.csv", table)
    run.primary_csv = table
    for i, e in enumerate(estimates):
        excess = max(e.lower_bound - e.value, e.value - e.upper_bound * (1 + 1e-6))
        run.reports.append(
            CertificateReport(
                "v0_sandwich",
                VIOLATED if excess > 0 else HOLDS,
                float(excess),
                0.0,
                {"xi": e.xi.tolist(), "input": e.witness_input.to_dict(), "time": e.witness_time},
                e.sample_budget,
                details={"V0": e.value, "lower": e.lower_bound, "upper": e.upper_bound, "time_cap": e.time_cap},
            )
        )
        run.write(f"v0_witness_{i}.json", dumps(e.witness_input.to_dict()))


def _grid(spec, default):
    if spec is None:
        return np.asarray(default, float)
    if isinstance(spec, dict):
        return np.linspace(spec["start"], spec["stop"], int(spec["num"]))
    return np.asarray(spec, float)


def cmd_settle(run: Run) -> None:
    spec = run.cfg.get("settle", {})
    beta = config.kl(spec.get("beta", "s*exp(-t)"))
    r_grid = _grid(spec.get("r_grid"), np.linspace(0.1, 1.0, 10))
    eps_grid = _grid(spec.get("eps_grid"), np.linspace(0.05, 0.5, 10))
    smap = settling_time_map(beta, r_grid, eps_grid, spec.get("t_max"))
    props = smap.check_properties()
    table = smap.to_csv()
    run.write("settle.csv", table)
    run.primary_csv = table
    ok = props["nonincreasing_in_eps"] and props["nondecreasing_in_r"] and props["continuous"]
    run.reports.append(
        CertificateReport("settling_map", HOLDS if ok else VIOLATED, float(props["worst_refined_gap_ratio"]), 0.9, {}, smap.table.size, details=props)
    )


def cmd_list_benchmarks(args) -> int:
    rows = benchmarks.list_benchmarks()
    if args.format == "json":
        _sys.stdout.write(dumps(rows))
        return 0
    _sys.stdout.write("name\tn\tm\tp\tgains\tcandidate\tnote\n")
    for r in rows:
        _sys.stdout.write(f"{r['name']}\t{r['n']}\t{r['m']}\t{r['p']}\t{r['gains']}\t{r['candidate']}\t{r['note']}\n")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "check-iioss": cmd_check_iioss,
    "falsify": cmd_falsify,
    "observe": cmd_observe,
    "check-lyapunov": cmd_check_lyapunov,
    "sufficiency": cmd_sufficiency,
    "compare": cmd_compare,
    "estimate-v0": cmd_estimate_v0,
    "settle": cmd_settle,
}


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iioss-lab", description="Numerical iIOSS verification toolkit")
    parser.add_argument("--version", action="version", version=f"iioss-lab {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--format", choices=("json", "csv"), default=None)
        if name == "list-benchmarks":
            continue
        p.add_argument("config_path", nargs="?", help="JSON run configuration")
        p.add_argument("--config", dest="config_opt", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--budget", type=int)
        p.add_argument("--dt", type=float)
        p.add_argument("--horizon", type=float)
        p.add_argument("--jobs", type=int)
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--xi", type=_floats)
        p.add_argument("--dynamics", action="append", help="dynamics component (repeat per state)")
        p.add_argument("--output", action="append", help="output component (repeat per output)")
        p.add_argument("--gain", action="append", metavar="NAME=EXPR", help="override one gain expression")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.subcommand == "list-benchmarks":
        return cmd_list_benchmarks(args)
    path = args.config_opt or args.config_path
    if path is None:
        parser.print_usage(_sys.stderr)
        _sys.stderr.write("iioss-lab: error: a config file is required\n")
        return 2
    try:
        if args.budget is not None and args.budget < 1:
            raise ArgumentError("--budget must be at least 1")
        run = Run(args, config.load(path))
        COMMANDS[args.subcommand](run)
        return run.finish(args.subcommand)
    except (IIOSSLabError, ValueError, KeyError, TypeError, OSError) as exc:
        _sys.stderr.write(f"iioss-lab: error: {exc}\n")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
