"""Shipped benchmark systems with gains, Lyapunov candidates and envelope gains."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_continuous_lyapunov

from .bounds import IIOSSGains
from .funclib import KINF, PD, ZERO, KLFunction, ScalarGain
from .lyap import LyapunovCandidate
from .sim import ControlSystem, ReachabilityEnvelope


@dataclass(frozen=True, eq=False)
class Benchmark:
    name: str
    system: ControlSystem
    note: str
    gains: IIOSSGains | None = None
    candidate: LyapunovCandidate | None = None
    sigma: ScalarGain | None = None
    envelope: ReachabilityEnvelope | None = None
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "name": self.name,
            "n": self.system.n,
            "m": self.system.m,
            "p": self.system.p,
            "gains": self.gains is not None,
            "candidate": self.candidate is not None,
            "sigma": self.sigma is not None,
            "note": self.note,
        }


def g(src: str, kind: str = "K", cap: float = 100.0) -> ScalarGain:
    return ScalarGain.from_expr(src, kind, cap)


def _fmt(v: float) -> str:
    return repr(float(v))


# ---------------------------------------------------------------------------
# linear algebra helpers


def pbh_detectable(A, C) -> bool:
    """Hautus test: rank [A - lambda I; C] = n for every eigenvalue with Re(lambda) >= 0."""
    A = np.asarray(A, float)
    C = np.atleast_2d(np.asarray(C, float))
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if lam.real >= 0:
            M = np.vstack([A - lam * np.eye(n), C])
            if np.linalg.matrix_rank(M, tol=1e-9) < n:
                return False
    return True


def linear_observer_gains(A, B, C, L) -> dict:
    """Gains from x' = (A - LC) x + L y + B u with F = A - LC Hurwitz.

    With F^T P + P F = -I: |e^{Ft}| <= M e^{-nu t}, M = sqrt(cond P), nu = 1/(2 lambda_max(P)).
    """
    A, B, C, L = (np.atleast_2d(np.asarray(a, float)) for a in (A, B, C, L))
    F = A - L @ C
    if np.max(np.linalg.eigvals(F).real) >= 0:
        raise ValueError("A - LC is not Hurwitz")
    P = solve_continuous_lyapunov(F.T, -np.eye(len(A)))
    ev = np.linalg.eigvalsh(P)
    M = float(np.sqrt(ev[-1] / ev[0]))
    nu = float(1.0 / (2.0 * ev[-1]))
    return {
        "M": M,
        "nu": nu,
        "L_norm": float(np.linalg.norm(L, 2)),
        "B_norm": float(np.linalg.norm(B, 2)),
    }


def _linear_system(A, B, C, name) -> ControlSystem:
    A, B, C = np.asarray(A, float), np.asarray(B, float), np.atleast_2d(np.asarray(C, float))
    n, m = B.shape

    def row(coefs, var):
        terms = [f"{_fmt(c)}*{var}{j + 1}" for j, c in enumerate(coefs) if c != 0]
        return terms

    dyn = [" + ".join(row(A[i], "x") + row(B[i], "u")) or "0" for i in range(n)]
    out = [" + ".join(row(C[i], "x")) or "0" for i in range(C.shape[0])]
    return ControlSystem.from_strings(dyn, out, n, m, name=name)


# ---------------------------------------------------------------------------
# registry


def xdot_u2() -> Benchmark:
    sys = ControlSystem.from_strings(["u1^2"], ["0"], 1, 1, name="xdot_u2")
    gains = IIOSSGains(g("s", KINF), KLFunction.from_expr("s*exp(-t)"), ScalarGain.zero(), g("s", KINF))
    return Benchmark(
        "xdot_u2",
        sys,
        "x' = u^2, y = 0: u_k = k on [0, 1/k] has unit gamma-energy and reaches x(1) = k",
        gains,
    )


def scalar_linear() -> Benchmark:
    sys = ControlSystem.from_strings(["-x1 + u1"], ["x1"], 1, 1, name="scalar_linear")
    gains = IIOSSGains(g("s", KINF), KLFunction.from_expr("s*exp(-t)"), ScalarGain.zero(), g("s", KINF))
    sigma = g("s", KINF)
    env = ReachabilityEnvelope(None, g("s", KINF), g("s", KINF), sigma)
    return Benchmark(
        "scalar_linear",
        sys,
        "x' = -x + u, y = x: |x(t)| <= e^-t |xi| + int |u| by variation of constants",
        gains,
        sigma=sigma,
        envelope=env,
    )


def scalar_iiss() -> Benchmark:
    sys = ControlSystem.from_strings(["-x1 + u1"], ["x1"], 1, 1, name="scalar_iiss")
    cand = LyapunovCandidate.from_strings(
        "ln(1 + x1^2)",
        1,
        {
            "alpha_lower": ScalarGain.from_expr("ln(1 + s^2)", KINF, 1e4),
            "alpha_upper": ScalarGain.from_expr("ln(1 + s^2)", KINF, 1e4),
            "sigma1": ScalarGain.zero(),
            "sigma2": g("2*s"),
            "kappa": g("2*s^2/(1 + s^2)", PD),
        },
        grad=["2*x1/(1 + x1^2)"],
    )
    gains = IIOSSGains(g("s", KINF), KLFunction.from_expr("s*exp(-t)"), ScalarGain.zero(), g("s", KINF))
    return Benchmark(
        "scalar_iiss",
        sys,
        "x' = -x + u with V = ln(1 + x^2): kappa = 2s^2/(1+s^2) is positive definite but bounded",
        gains,
        cand,
        sigma=g("s", KINF),
    )


def unstable_scalar() -> Benchmark:
    sys = ControlSystem.from_strings(["x1"], ["0"], 1, 1, name="unstable_scalar")
    cand = LyapunovCandidate.from_strings(
        "x1^2/2",
        1,
        {
            "alpha_lower": g("s^2/2", KINF),
            "alpha_upper": g("s^2/2", KINF),
            "sigma1": ScalarGain.zero(),
            "sigma2": g("s"),
            "kappa": g("s^2", PD),
        },
        grad=["x1"],
    )
    return Benchmark("unstable_scalar", sys, "x' = x, y = 0: V = x^2/2 grows, every decrease check must fail", candidate=cand)


DETECTABLE_A = [[1.0, 0.0], [1.0, -2.0]]
UNDETECTABLE_A = [[1.0, 0.0], [1.0, 2.0]]
LINEAR_B = [[0.0], [1.0]]
LINEAR_C = [[1.0, 0.0]]
LINEAR_L = [[2.0], [0.0]]


def _linear_gains() -> IIOSSGains:
    k = linear_observer_gains(DETECTABLE_A, LINEAR_B, LINEAR_C, LINEAR_L)
    M, nu = k["M"], k["nu"]
    return IIOSSGains(
        g("s", KINF),
        KLFunction.from_expr(f"{_fmt(M)}*exp(-{_fmt(nu)}*t)*s"),
        g(f"{_fmt(M * k['L_norm'])}*s", KINF),
        g(f"{_fmt(M * k['B_norm'])}*s", KINF),
    )


def linear_detectable_2d() -> Benchmark:
    sys = _linear_system(DETECTABLE_A, LINEAR_B, LINEAR_C, "linear_detectable_2d")
    return Benchmark(
        "linear_detectable_2d",
        sys,
        "unstable mode seen by y = x1; gains from the observer error system with L = (2, 0)",
        _linear_gains(),
        extra={"A": DETECTABLE_A, "B": LINEAR_B, "C": LINEAR_C, "L": LINEAR_L},
    )


def linear_undetectable_2d() -> Benchmark:
    sys = _linear_system(UNDETECTABLE_A, LINEAR_B, LINEAR_C, "linear_undetectable_2d")
    return Benchmark(
        "linear_undetectable_2d",
        sys,
        "unstable mode e^{2t} invisible in y = x1; carries the detectable pair's gains, which must fail",
        _linear_gains(),
        extra={"A": UNDETECTABLE_A, "B": LINEAR_B, "C": LINEAR_C},
    )


def passive_oscillator() -> Benchmark:
    sys = ControlSystem.from_strings(["x2", "-x1 - x2 + u1"], ["x2"], 2, 1, name="passive_oscillator")
    cand = LyapunovCandidate.from_strings(
        "0.5*x1^2 + 0.5*x2^2 + 0.5*x1*x2",
        2,
        {
            "alpha_lower": g("0.25*s^2", KINF),
            "alpha_upper": g("0.75*s^2", KINF),
            "sigma1": ScalarGain.zero(),
            "sigma2": g("2.5*s^2"),
            "kappa": g("s^2/8", PD),
        },
        grad=["x1 + 0.5*x2", "x2 + 0.5*x1"],
    )
    return Benchmark(
        "passive_oscillator",
        sys,
        "damped oscillator with y = x2, passive from u to y; quadratic certificate with kappa = s^2/8",
        candidate=cand,
    )


REGISTRY = {
    f.__name__: f
    for f in (
        xdot_u2,
        scalar_linear,
        scalar_iiss,
        unstable_scalar,
        linear_detectable_2d,
        linear_undetectable_2d,
        passive_oscillator,
    )
}


def get(name: str) -> Benchmark:
    try:
        return REGISTRY[name]()
    except KeyError:
        raise KeyError(f"unknown benchmark {name!r}; known: {sorted(REGISTRY)}") from None


def list_benchmarks() -> list[dict]:
    return [REGISTRY[k]().summary() for k in REGISTRY]
