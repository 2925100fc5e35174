"""Checking and falsifying the iIOSS trajectory bound and running the norm observer.

Sample-based checks never certify the bound; a passing report reads
``no_violation_found`` at the sampled budget.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .funclib import K, KINF, ZERO, KLFunction, ScalarGain, invert, verify_kind, verify_kl
from .parallel import map_chunks
from .report import NO_VIOLATION, VIOLATED, CertificateReport
from .sim import ControlSystem, InputSignal, Quadrature, integrate_batch, n_steps, norms, worst_witness


def default_tolerance(dt: float) -> float:
    return 1e-6 + 10.0 * dt**4


@dataclass(frozen=True, eq=False)
class IIOSSGains:
    alpha: ScalarGain
    beta: KLFunction
    gamma1: ScalarGain
    gamma2: ScalarGain

    def verify(self) -> dict:
        out = {
            "alpha": verify_kind(self.alpha, kind=KINF).passed,
            "beta": verify_kl(self.beta).passed,
        }
        for name in ("gamma1", "gamma2"):
            g = getattr(self, name)
            out[name] = verify_kind(g, kind=ZERO if g.kind == ZERO else K).passed
        return out

    def to_dict(self) -> dict:
        return {k: getattr(self, k).to_dict() for k in ("alpha", "beta", "gamma1", "gamma2")}


@dataclass(frozen=True, eq=False)
class NormObserverState:
    times: np.ndarray
    p: np.ndarray


def _observer_quadrature(sys: ControlSystem, gains: IIOSSGains) -> Quadrature:
    g1 = None if gains.gamma1.kind == ZERO else (lambda X: gains.gamma1(norms(sys.eval_h(X))))
    return Quadrature(state=g1, input=lambda U: gains.gamma2(norms(U)))


def _iioss_chunk(sys, gains, xis, sigs, dt, horizon, alternate=False):
    if alternate:
        q = {
            "g1": Quadrature(state=lambda X: gains.gamma1(norms(sys.eval_h(X)))),
            "g2": Quadrature(input=lambda U: gains.gamma2(norms(U))),
        }
    else:
        q = {"p": _observer_quadrature(sys, gains)}
    tb = integrate_batch(sys, xis, sigs, dt, horizon, q)
    lhs = gains.alpha(norms(tb.states))
    beta = gains.beta(norms(tb.xis)[:, None], tb.times[None, :])
    if alternate:
        g2 = tb.integrals["g2"]
        rhs = beta + tb.integrals["g1"] + g2[:, -1:]
    else:
        rhs = beta + tb.integrals["p"]
    return tb, lhs - rhs


def _paired(xi_samples, input_samples):
    xis = np.atleast_2d(np.asarray(xi_samples, float))
    if len(xis) != len(input_samples):
        raise ValueError("xi_samples and input_samples are paired and must have equal length")
    if len(xis) == 0:
        raise ValueError("need at least one sample")
    return xis


def _report(check, results, xis, sigs, dt, tol, extra_notes=(), details=None):
    margin, b, k, diverged = worst_witness(results)
    verdict = VIOLATED if diverged or margin > tol else NO_VIOLATION
    witness = {"xi": xis[b].tolist(), "input": sigs[b].to_dict(), "time": k * dt, "index": b}
    if diverged:
        witness["diverged"] = True
    return CertificateReport(
        check,
        verdict,
        margin,
        tol,
        witness,
        len(xis),
        tolerances={"dt": dt},
        notes=list(extra_notes),
        details=details or {},
    )


def check_iioss(
    sys: ControlSystem,
    gains: IIOSSGains,
    xi_samples,
    input_samples,
    dt: float,
    horizon: float,
    tol: float | None = None,
    jobs: int = 1,
) -> CertificateReport:
    """Evaluate alpha(|x|) - beta(|xi|, t) - int_0^t gamma1(|y|) + gamma2(|u|) on every grid time."""
    xis = _paired(xi_samples, input_samples)
    tol = default_tolerance(dt) if tol is None else tol
    results = map_chunks(
        lambda idx: _iioss_chunk(sys, gains, xis[idx], [input_samples[i] for i in idx], dt, horizon),
        len(xis),
        jobs,
    )
    return _report("iioss", results, xis, input_samples, dt, tol)


def check_iioss_alternate(
    sys: ControlSystem,
    gains: IIOSSGains,
    xi_samples,
    input_samples,
    dt: float,
    horizon: float,
    tol: float | None = None,
    jobs: int = 1,
) -> CertificateReport:
    """Same check with the gamma2 integral taken over the whole horizon."""
    xis = _paired(xi_samples, input_samples)
    tol = default_tolerance(dt) if tol is None else tol
    results = map_chunks(
        lambda idx: _iioss_chunk(sys, gains, xis[idx], [input_samples[i] for i in idx], dt, horizon, True),
        len(xis),
        jobs,
    )
    return _report(
        "iioss_alternate",
        results,
        xis,
        input_samples,
        dt,
        tol,
        ["input integral truncated at the run horizon; this RHS dominates the cumulative form pointwise"],
    )


# ---------------------------------------------------------------------------
# falsification

FAMILIES = ("impulse", "constant", "piecewise")


def _unit_directions(rng, count, m):
    if m == 0:
        return np.zeros((count, 0))
    d = rng.standard_normal((count, m))
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
    return d


def _amplitudes(gamma2, targets):
    """gamma2^{-1}(targets); saturated targets are clamped to the gain's cap,
    which keeps the energy within budget."""
    top = gamma2(gamma2.domain_cap)
    ok = targets <= top
    out = np.full(targets.shape, float(gamma2.domain_cap))
    if np.any(ok):
        out[ok] = invert(gamma2, targets[ok])
    return out


def falsification_candidates(
    sys: ControlSystem,
    gains: IIOSSGains,
    budget: int,
    seed: int,
    radius: float = 1.0,
    dt: float = 1e-3,
    horizon: float = 1.0,
    energy_budget: float | None = None,
    amp_max: float = 100.0,
    segments: int = 8,
):
    """Deterministic candidate (xi, input, family) triples for :func:`falsify`."""
    rng = np.random.default_rng(seed)
    N = n_steps(dt, horizon)
    n, m = sys.n, sys.m
    fam = np.array([FAMILIES[j % 3] for j in range(budget)])
    # initial states: a quarter at the origin, the rest uniform in the ball
    at_origin = rng.random(budget) < 0.25
    dirs = _unit_directions(rng, budget, n)
    rad = radius * rng.random(budget) ** (1.0 / max(n, 1))
    xis = np.where(at_origin[:, None], 0.0, dirs * rad[:, None])
    udirs = _unit_directions(rng, budget, m)
    width_steps = np.floor(np.exp(rng.uniform(0.0, np.log(max(N, 1)) + 1e-12, budget))).astype(int)
    width_steps = np.clip(width_steps, 1, max(N, 1))
    log_amp = np.exp(rng.uniform(np.log(1e-2), np.log(amp_max), budget))
    seg_weights = rng.dirichlet(np.ones(segments), budget)
    seg_amp = np.exp(rng.uniform(np.log(1e-2), np.log(amp_max), (budget, segments)))
    seg_dirs = _unit_directions(rng, budget * segments, m).reshape(budget, segments, m)

    energy = energy_budget is not None and gains.gamma2.kind != ZERO
    bounds = np.unique(np.round(np.linspace(0, N, segments + 1)).astype(int))
    seg_len = np.diff(bounds) * dt
    if energy:
        width = width_steps * dt
        imp_amp = _amplitudes(gains.gamma2, energy_budget / width)
        const_amp = _amplitudes(gains.gamma2, np.full(budget, energy_budget / max(horizon, dt)))
        k = len(seg_len)
        w = seg_weights[:, :k] / seg_weights[:, :k].sum(axis=1, keepdims=True)
        seg_amp = _amplitudes(gains.gamma2, (energy_budget * w / seg_len).ravel()).reshape(budget, k)
    else:
        imp_amp = const_amp = log_amp

    sigs = []
    for j in range(budget):
        if fam[j] == "impulse":
            width = width_steps[j] * dt
            sigs.append(InputSignal.impulse(imp_amp[j] * udirs[j], width, horizon))
        elif fam[j] == "constant":
            sigs.append(InputSignal.constant(const_amp[j] * udirs[j], horizon))
        else:
            k = len(bounds) - 1
            vals = seg_amp[j, :k, None] * seg_dirs[j, :k]
            sigs.append(InputSignal(bounds[:-1] * dt, vals, horizon))
        if sys.input_box is not None:
            lo, hi = sys.input_box
            s = sigs[-1]
            sigs[-1] = InputSignal(s.breakpoints, np.clip(s.values, lo, hi), s.horizon)
    return xis, sigs, fam


def falsify(
    sys: ControlSystem,
    gains: IIOSSGains,
    budget: int,
    seed: int,
    radius: float = 1.0,
    dt: float = 1e-3,
    horizon: float = 1.0,
    energy_budget: float | None = None,
    amp_max: float = 100.0,
    segments: int = 8,
    tol: float | None = None,
    jobs: int = 1,
) -> CertificateReport:
    """Randomized search for a violation of the iIOSS bound.

    Candidates: initial states in a ball and impulse, constant and random
    piecewise-constant inputs. With ``energy_budget`` every input is scaled to
    carry exactly that much gamma2-energy. The best witness is reported even
    when nothing violates.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    tol = default_tolerance(dt) if tol is None else tol
    xis, sigs, fam = falsification_candidates(
        sys, gains, budget, seed, radius, dt, horizon, energy_budget, amp_max, segments
    )
    results = map_chunks(
        lambda idx: _iioss_chunk(sys, gains, xis[idx], [sigs[i] for i in idx], dt, horizon), len(xis), jobs
    )
    rep = _report(
        "falsify",
        results,
        xis,
        sigs,
        dt,
        tol,
        details={"budget": budget, "seed": seed, "radius": radius, "horizon": horizon, "energy_budget": energy_budget},
    )
    b = rep.witness["index"]
    rep.witness["family"] = str(fam[b])
    return rep


def run_norm_observer(
    sys: ControlSystem,
    gains: IIOSSGains,
    xi,
    u: InputSignal,
    dt: float,
    horizon: float,
    tol: float | None = None,
) -> tuple[NormObserverState, CertificateReport]:
    """Integrate p' = gamma1(|y|) + gamma2(|u|), p(0) = 0, and test alpha(|x|) <= beta(|xi|, t) + p."""
    tol = default_tolerance(dt) if tol is None else tol
    xis = np.atleast_2d(np.asarray(xi, float))
    results = [_iioss_chunk(sys, gains, xis, [u], dt, horizon)]
    tb = results[0][0]
    state = NormObserverState(tb.times, tb.integrals["p"][0])
    rep = _report("norm_observer", results, xis, [u], dt, tol)
    rep.details["p_final"] = float(state.p[-1])
    rep.details["p_nondecreasing"] = bool(np.all(np.diff(state.p[np.isfinite(state.p)]) >= 0))
    return state, rep


def run_norm_observer_batch(
    sys: ControlSystem,
    gains: IIOSSGains,
    xi_samples,
    input_samples,
    dt: float,
    horizon: float,
    tol: float | None = None,
    jobs: int = 1,
) -> tuple[NormObserverState, CertificateReport]:
    """Vectorised ``run_norm_observer`` over paired runs; ``state.p`` has one row per run."""
    tol = default_tolerance(dt) if tol is None else tol
    xis = _paired(xi_samples, input_samples)
    results = list(
        map_chunks(
            lambda idx: _iioss_chunk(sys, gains, xis[idx], [input_samples[i] for i in idx], dt, horizon),
            len(xis),
            jobs,
        )
    )
    p = np.concatenate([tb.integrals["p"] for tb, _ in results])
    state = NormObserverState(results[0][0].times, p)
    rep = _report("norm_observer", results, xis, input_samples, dt, tol)
    steps = np.diff(p, axis=1)
    rep.details["p_final"] = p[:, -1].tolist()
    rep.details["p_nondecreasing"] = bool(np.all(steps[np.isfinite(steps)] >= 0))
    return state, rep
