"""JSON run configurations: systems, gains, candidates and sampling settings."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from . import benchmarks
from .bounds import IIOSSGains
from .errors import ArgumentError
from .funclib import DEFAULT_CAP, K, KLFunction, ScalarGain, ZERO
from .lyap import LyapunovCandidate
from .sim import ControlSystem, InputSignal
from .valfun import WeightFunction

SAMPLING_DEFAULTS = {
    "seed": 0,
    "budget": 1000,
    "samples": 200,
    "dt": 1e-3,
    "horizon": 1.0,
    "radius": 1.0,
    "amplitude": 1.0,
    "energy_budget": None,
    "amp_max": 100.0,
    "x_box": 10.0,
    "u_box": 10.0,
    "tolerance": None,
}


def load(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ArgumentError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ArgumentError(f"{path}: top level must be an object")
    cfg.setdefault("_path", str(Path(path)))
    return cfg


def config_hash(cfg: dict) -> str:
    clean = {k: v for k, v in cfg.items() if not k.startswith("_")}
    return hashlib.sha256(json.dumps(clean, sort_keys=True).encode()).hexdigest()


def sampling(cfg: dict) -> dict:
    s = {**SAMPLING_DEFAULTS, **cfg.get("sampling", {})}
    if not s["dt"] > 0:
        raise ArgumentError("sampling.dt must be positive")
    for key in ("budget", "samples"):
        if int(s[key]) < 1:
            raise ArgumentError(f"sampling.{key} must be at least 1")
    return s


def _benchmark(cfg: dict):
    name = cfg.get("benchmark") or cfg.get("system", {}).get("benchmark")
    return benchmarks.get(name) if name else None


def gain(spec, kind: str = K) -> ScalarGain:
    if isinstance(spec, (int, float)) and spec == 0:
        return ScalarGain.zero()
    if isinstance(spec, str):
        return ScalarGain.zero() if spec.strip() == "0" else ScalarGain.from_expr(spec, kind)
    if not isinstance(spec, dict) or "expr" not in spec:
        raise ArgumentError(f"bad gain specification {spec!r}")
    k = spec.get("kind", kind)
    cap = float(spec.get("cap", spec.get("domain_cap", DEFAULT_CAP)))
    if k == ZERO:
        return ScalarGain.zero(cap)
    return ScalarGain.from_expr(spec["expr"], k, cap)


def kl(spec) -> KLFunction:
    if isinstance(spec, str):
        return KLFunction.from_expr(spec)
    if not isinstance(spec, dict) or "expr" not in spec:
        raise ArgumentError(f"bad KL specification {spec!r}")
    return KLFunction.from_expr(spec["expr"], float(spec.get("cap", DEFAULT_CAP)), spec.get("t_cap"))


def system(cfg: dict) -> ControlSystem:
    spec = cfg.get("system")
    bench = _benchmark(cfg)
    if spec is None or set(spec) <= {"benchmark"}:
        if bench is None:
            raise ArgumentError("config needs a 'system' or a 'benchmark'")
        return bench.system
    try:
        return ControlSystem.from_strings(
            spec["dynamics"], spec["output"], spec.get("n"), spec.get("m", 1), spec.get("input_box"), spec.get("name", "")
        )
    except KeyError as exc:
        raise ArgumentError(f"system spec misses {exc}") from exc


def gains(cfg: dict) -> IIOSSGains:
    """Gains from the config; missing entries fall back to the benchmark's gains."""
    spec = {k: v for k, v in cfg.get("gains", {}).items() if k in ("alpha", "beta", "gamma1", "gamma2")}
    bench = _benchmark(cfg)
    base = bench.gains if bench is not None else None
    missing = [k for k in ("alpha", "beta", "gamma1", "gamma2") if k not in spec]
    if missing and base is None:
        raise ArgumentError(f"config misses gains {missing} and names no benchmark providing them")
    parts = {
        "alpha": gain(spec["alpha"], "Kinf") if "alpha" in spec else base.alpha,
        "beta": kl(spec["beta"]) if "beta" in spec else base.beta,
        "gamma1": gain(spec["gamma1"]) if "gamma1" in spec else base.gamma1,
        "gamma2": gain(spec["gamma2"]) if "gamma2" in spec else base.gamma2,
    }
    return IIOSSGains(**parts)


def sigma(cfg: dict) -> ScalarGain:
    spec = cfg.get("gains", {}).get("sigma")
    if spec is not None:
        return gain(spec)
    bench = _benchmark(cfg)
    if bench is None or bench.sigma is None:
        raise ArgumentError("config needs gains.sigma (reachability envelope gain)")
    return bench.sigma


def candidate(cfg: dict) -> LyapunovCandidate:
    spec = cfg.get("candidate")
    if spec is None:
        bench = _benchmark(cfg)
        if bench is None or bench.candidate is None:
            raise ArgumentError("config needs a 'candidate'")
        return bench.candidate
    sys = system(cfg)
    try:
        return LyapunovCandidate.from_strings(
            spec["V"],
            sys.n,
            {
                "alpha_lower": gain(spec["alpha_lower"], "Kinf"),
                "alpha_upper": gain(spec["alpha_upper"], "Kinf"),
                "sigma1": gain(spec["sigma1"]),
                "sigma2": gain(spec["sigma2"]),
                "kappa": gain(spec["kappa"], "PositiveDefinite"),
            },
            spec.get("grad"),
        )
    except KeyError as exc:
        raise ArgumentError(f"candidate spec misses {exc}") from exc


def weight(cfg: dict) -> WeightFunction:
    spec = cfg.get("weight")
    if spec is None:
        return WeightFunction.default()
    return WeightFunction.from_strings(spec["k"], spec["lambda"], spec["c1"], spec["c2"])


def input_signal(spec, m: int, horizon: float) -> InputSignal:
    if spec is None:
        return InputSignal.zero(m, horizon)
    if isinstance(spec, (int, float, list)):
        return InputSignal.constant(spec, horizon)
    return InputSignal.from_dict(spec)
