"""Checks for iIOSS Lyapunov certificates: sandwich bound, differential and integral decrease."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

from .bounds import default_tolerance
from .dsl import Expression, gradient_batch, one_sided_gap, parse
from .errors import ModelError
from .funclib import KINF, ZERO, ScalarGain, verify_kind
from .parallel import map_chunks
from .report import HOLDS, INCONCLUSIVE, VIOLATED, CertificateReport, ComparisonReport
from .sim import ControlSystem, InputSignal, Quadrature, integrate_batch, norms

DEFAULT_BOX = 10.0
DEFAULT_SAMPLES = 10_000


@dataclass(frozen=True, eq=False)
class LyapunovCandidate:
    V: Expression
    alpha_lower: ScalarGain
    alpha_upper: ScalarGain
    sigma1: ScalarGain
    sigma2: ScalarGain
    kappa: ScalarGain
    gradV: tuple | None = None

    def __post_init__(self):
        if self.V.depends_on("u"):
            raise ModelError("V may depend on the state only")
        if abs(float(self.V.batch(np.zeros((1, self.V.n)))[0])) > 1e-12:
            raise ModelError("V(0) must vanish")
        if self.gradV is not None and len(self.gradV) != self.V.n:
            raise ModelError("gradient needs one expression per state")

    @classmethod
    def from_strings(cls, V: str, n: int, gains: dict, grad=None) -> "LyapunovCandidate":
        def gain(g):
            return g if isinstance(g, ScalarGain) else ScalarGain.from_expr(*g)

        return cls(
            parse(V, n, 0, scalars=()),
            gain(gains["alpha_lower"]),
            gain(gains["alpha_upper"]),
            gain(gains["sigma1"]),
            gain(gains["sigma2"]),
            gain(gains["kappa"]),
            None if grad is None else tuple(parse(g, n, 0, scalars=()) for g in grad),
        )

    @property
    def n(self) -> int:
        return self.V.n

    def values(self, X) -> np.ndarray:
        return np.asarray(self.V.batch(np.asarray(X, float)), float)

    def grad(self, X) -> np.ndarray:
        X = np.asarray(X, float)
        if self.gradV is None:
            return gradient_batch(self.V, X)
        return np.stack([np.broadcast_to(g.batch(X), X.shape[:1]) for g in self.gradV], axis=1)

    def verify(self) -> dict:
        out = {}
        for name, kinds in (
            ("alpha_lower", (KINF,)),
            ("alpha_upper", (KINF,)),
            ("sigma1", ("K", ZERO)),
            ("sigma2", ("K", ZERO)),
            ("kappa", ("PositiveDefinite",)),
        ):
            g = getattr(self, name)
            out[name] = any(verify_kind(g, kind=k).passed for k in kinds if k != ZERO or g.kind == ZERO)
        return out

    def is_ioss(self) -> bool:
        """kappa of class K-infinity makes the certificate an IOSS Lyapunov function."""
        return verify_kind(self.kappa, kind=KINF).passed


def quasi_random(count: int, dim: int, box: float, seed: int = 0) -> np.ndarray:
    """Scrambled Halton points in the hypercube [-box, box]^dim."""
    if dim == 0:
        return np.zeros((count, 0))
    pts = qmc.Halton(dim, scramble=True, seed=seed).random(count)
    return box * (2.0 * pts - 1.0)


def differential_samples(sys: ControlSystem, count: int = DEFAULT_SAMPLES, x_box: float = DEFAULT_BOX, u_box: float = DEFAULT_BOX, seed: int = 0):
    """Paired (state, input) points drawn jointly from one quasi-random sequence."""
    pts = quasi_random(count, sys.n + sys.m, 1.0, seed)
    X = x_box * pts[:, : sys.n]
    U = u_box * pts[:, sys.n :]
    if sys.input_box is not None:
        lo, hi = sys.input_box
        U = np.clip(U, lo, hi)
    return X, U


def check_sandwich(
    cand: LyapunovCandidate, sample_box: float = DEFAULT_BOX, samples: int = DEFAULT_SAMPLES, seed: int = 0, points=None, tol: float = 1e-9
) -> CertificateReport:
    """alpha_lower(|x|) <= V(x) <= alpha_upper(|x|) at quasi-random points."""
    X = quasi_random(samples, cand.n, sample_box, seed) if points is None else np.atleast_2d(np.asarray(points, float))
    r = norms(X)
    v = cand.values(X)
    lower = cand.alpha_lower(r) - v
    upper = v - cand.alpha_upper(r)
    side = np.maximum(lower, upper)
    i = int(np.argmax(side))
    margin = float(side[i])
    return CertificateReport(
        "sandwich",
        VIOLATED if margin > tol else HOLDS,
        margin,
        tol,
        {"xi": X[i].tolist(), "side": "lower" if lower[i] >= upper[i] else "upper"},
        len(X),
        tolerances={"box": sample_box},
        details={"lower_margin": float(lower.max()), "upper_margin": float(upper.max())},
    )


def check_decrease_differential(
    cand: LyapunovCandidate,
    sys: ControlSystem,
    state_samples,
    input_samples,
    tol: float = 1e-6,
    kink_tol: float = 1e-3,
) -> CertificateReport:
    """grad V(x) . f(x, mu) + kappa(|x|) - sigma1(|h(x)|) - sigma2(|mu|) <= tol at paired samples.

    Without an analytic gradient, points where forward and backward difference
    quotients disagree by more than ``kink_tol`` are marked inconclusive.
    """
    X = np.atleast_2d(np.asarray(state_samples, float))
    U = np.asarray(input_samples, float).reshape(len(X), sys.m)
    G = cand.grad(X)
    F = sys.eval_f(X, U)
    lhs = np.sum(G * F, axis=1)
    rhs = -cand.kappa(norms(X)) + cand.sigma1(norms(sys.eval_h(X))) + cand.sigma2(norms(U))
    diff = lhs - rhs
    if cand.gradV is None:
        kinked = one_sided_gap(cand.V, X) > kink_tol
    else:
        kinked = np.zeros(len(X), bool)
    conclusive = np.where(kinked, -np.inf, diff)
    i = int(np.argmax(conclusive))
    margin = float(conclusive[i]) if np.isfinite(conclusive[i]) else float(np.max(diff))
    if margin > tol and not kinked[i]:
        verdict = VIOLATED
    elif np.any(kinked):
        verdict = INCONCLUSIVE
    else:
        verdict = HOLDS
    notes = []
    if cand.is_ioss():
        notes.append("kappa is of class K-infinity: certificate is an IOSS Lyapunov function")
    return CertificateReport(
        "decrease_differential",
        verdict,
        margin,
        tol,
        {"xi": X[i].tolist(), "mu": U[i].tolist()},
        len(X),
        tolerances={"kink": kink_tol},
        notes=notes,
        details={
            "inconclusive_points": int(np.count_nonzero(kinked)),
            "gradient": "analytic" if cand.gradV is not None else "central differences",
            "ioss_lyapunov_function": cand.is_ioss(),
        },
    )


def decrease_profile(cand: LyapunovCandidate, sys: ControlSystem, xis, signals, dt: float, horizon: float):
    """D(t) = V(x(t)) - V(xi) - int_0^t w for each run, with w = -kappa + sigma1 + sigma2.

    The decrease inequality over [t1, t2] reads D(t2) - D(t1) <= 0.
    """
    q = {
        "w": Quadrature(
            state=lambda X: -cand.kappa(norms(X)) + cand.sigma1(norms(sys.eval_h(X))),
            input=lambda U: cand.sigma2(norms(U)),
        )
    }
    tb = integrate_batch(sys, xis, signals, dt, horizon, q)
    B, T1, n = tb.states.shape
    V = cand.values(tb.states.reshape(-1, n)).reshape(B, T1)
    return tb, V - V[:, :1] - tb.integrals["w"]


def _pair_margins(D: np.ndarray):
    """max over t1 <= t2 of D(t2) - D(t1), with the maximizing (t1, t2) indices per row."""
    run_min = np.minimum.accumulate(D, axis=1)
    gain = D - run_min
    k2 = np.argmax(gain, axis=1)
    rows = np.arange(D.shape[0])
    best = gain[rows, k2]
    k1 = np.array([int(np.argmin(D[b, : k2[b] + 1])) for b in rows])
    return best, k1, k2


def check_decrease_integral(
    cand: LyapunovCandidate,
    sys: ControlSystem,
    xi_samples,
    input_samples,
    dt: float,
    horizon: float,
    tol: float | None = None,
    jobs: int = 1,
) -> CertificateReport:
    """V(x(t2)) - V(x(t1)) <= int_{t1}^{t2} w along each run, for all grid pairs t1 <= t2."""
    xis = np.atleast_2d(np.asarray(xi_samples, float))
    tol = default_tolerance(dt) if tol is None else tol

    def chunk(idx):
        tb, D = decrease_profile(cand, sys, xis[idx], [input_samples[i] for i in idx], dt, horizon)
        div = tb.diverged_index >= 0
        best, k1, k2 = _pair_margins(np.where(div[:, None], 0.0, D))
        return best, k1, k2, div

    best = (-np.inf, 0, 0, 0, False)
    offset = 0
    for m, k1, k2, div in map_chunks(chunk, len(xis), jobs):
        if np.any(div):
            b = int(np.argmax(div))
            best = (np.inf, offset + b, 0, 0, True)
            break
        b = int(np.argmax(m))
        if m[b] > best[0]:
            best = (float(m[b]), offset + b, int(k1[b]), int(k2[b]), False)
        offset += len(m)
    margin, b, k1, k2, diverged = best
    witness = {"xi": xis[b].tolist(), "input": input_samples[b].to_dict(), "time": k2 * dt, "t1": k1 * dt, "t2": k2 * dt}
    if diverged:
        witness["diverged"] = True
    return CertificateReport(
        "decrease_integral",
        VIOLATED if diverged or margin > tol else HOLDS,
        margin,
        tol,
        witness,
        len(xis),
        tolerances={"dt": dt},
        notes=["authoritative decrease check for nonsmooth candidates"],
    )


def cross_check_forms(
    cand: LyapunovCandidate,
    sys: ControlSystem,
    samples,
    dt: float = 1e-2,
    horizon: float = 1.0,
    tol: float = 1e-6,
    refinements: int = 6,
) -> ComparisonReport:
    """Run the differential and integral decrease checks on common samples and compare.

    The integral route uses constant inputs equal to the sampled input values.
    On disagreement the integral route is repeated with halved steps; the first
    step size at which both routes agree is recommended.
    """
    X, U = samples
    X = np.atleast_2d(np.asarray(X, float))
    U = np.asarray(U, float).reshape(len(X), sys.m)
    sigs = [InputSignal.constant(U[i], horizon) for i in range(len(X))]
    diff = check_decrease_differential(cand, sys, X, U, tol)
    integ = check_decrease_integral(cand, sys, X, sigs, dt, horizon, tol + 10 * dt**4)
    agree = diff.violated == integ.violated
    details = {"differential_margin": diff.margin, "integral_margin": integ.margin, "dt": dt}
    diagnostic = "routes agree"
    if not agree:
        rec = None
        step = dt
        for _ in range(refinements):
            step /= 2
            if abs(round(horizon / step) * step - horizon) > 1e-9:
                break
            again = check_decrease_integral(cand, sys, X, sigs, step, horizon, tol + 10 * step**4)
            if again.violated == diff.violated:
                rec = step
                break
        details["recommended_dt"] = rec
        diagnostic = (
            f"routes disagree at dt={dt!r}; likely integrator/step-size error"
            + (f", agreement restored at dt={rec!r}" if rec else ", not resolved by step refinement")
        )
    return ComparisonReport(
        "forms_cross_check",
        agree,
        {"differential": diff.verdict, "integral": integ.verdict},
        diagnostic,
        details,
    )
