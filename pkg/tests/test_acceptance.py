"""Acceptance suite: ten end-to-end criteria with tolerances and runtime limits.

Run with ``pytest tests/test_acceptance.py -v`` or ``python3 tests/test_acceptance.py``;
each criterion prints one PASS/FAIL line.
"""

import math
import time

import numpy as np
import pytest

from iioss_lab import benchmarks
from iioss_lab.bounds import falsify, run_norm_observer_batch
from iioss_lab.compare import (
    ComparisonInstance,
    KLFunction,
    kl_bound,
    random_instances,
    sufficiency_pipeline,
    verify_dominance,
    verify_kl_bound,
)
from iioss_lab.funclib import PD, ScalarGain, settling_time_map
from iioss_lab.lyap import check_decrease_differential, check_decrease_integral, cross_check_forms, differential_samples
from iioss_lab.report import dumps
from iioss_lab.sim import InputSignal, integrate, random_runs
from iioss_lab.valfun import WeightFunction, estimate_v0, evaluate_candidate

from oracles import QUADRATIC_ALPHAS, piecewise_quadratic_flow

_DERIVED = {}


def _derived_scalar_iiss_gains():
    """Gains produced by the sufficiency pipeline for scalar_iiss (shared with criterion 7)."""
    if "gains" not in _DERIVED:
        b = benchmarks.get("scalar_iiss")
        t0 = time.perf_counter()
        bound, _ = sufficiency_pipeline(b.candidate, b.system, [[0.0]], [InputSignal.zero(1, 1.0)], 1e-2, 1.0)
        _DERIVED["gains"] = bound.as_iioss_gains()
        _DERIVED["seconds"] = time.perf_counter() - t0
    return _DERIVED["gains"]


def criterion_1():
    b = benchmarks.get("xdot_u2")
    reports, finals, worst_time = [], [], 0.0
    for seed in range(5):
        t0 = time.perf_counter()
        rep = falsify(b.system, b.gains, budget=1000, seed=seed, energy_budget=1.0, amp_max=100.0)
        worst_time = max(worst_time, time.perf_counter() - t0)
        sig = InputSignal.from_dict(rep.witness_input)
        x1 = float(integrate(b.system, rep.witness_xi, sig, 1e-3, 1.0).states[-1, 0])
        finals.append(x1)
        reports.append(rep.to_dict())
    ok = all(abs(x) >= 10 - 1e-6 for x in finals) and worst_time < 5.0
    return ok, f"min |x(1)| over seeds 0-4 = {min(map(abs, finals)):.4f}, slowest seed {worst_time:.2f} s", reports


def criterion_2():
    dt, H = 1e-2, 5.0
    grid = np.arange(int(round(H / dt)) + 1) * dt
    names = list(QUADRATIC_ALPHAS)
    shrunk_ok, worst_shrunk, worst_exact, reports = True, -np.inf, 0.0, []
    for kind, count in (("shrunk", 50), ("exact", 50)):
        for j in range(count):
            name = names[j % 3]
            c1, c2 = QUADRATIC_ALPHAS[name]
            alpha = ScalarGain.from_expr(name, PD)
            y0s, sigs = random_instances(alpha, 1, seed=1000 * (kind == "exact") + j, dt=dt, horizon=H, y0_max=1.0, energy_max=1.0)
            y0, v = float(y0s[0]), sigs[0]
            y = piecewise_quadratic_flow(c1, c2, y0, v, grid)
            scale = 0.9 if kind == "shrunk" else 1.0
            rep = verify_dominance(grid, scale * y, ComparisonInstance(alpha, v, scale * y0, H), dt, tol=1e-6)
            if kind == "shrunk":
                shrunk_ok &= rep.passed
                worst_shrunk = max(worst_shrunk, rep.margin)
            else:
                worst_exact = max(worst_exact, abs(rep.margin))
            reports.append(rep.to_dict())
    ok = shrunk_ok and worst_exact <= 10 * dt**4
    return ok, f"shrunk max(y - w) = {worst_shrunk:.3e} (<= 1e-6), exact max |y - w| = {worst_exact:.3e} (<= {10 * dt**4:.0e})", reports


def criterion_3():
    reports, ok, margins = [], True, []
    for src in ("s", "s^2", "s/(1+s)"):
        alpha = ScalarGain.from_expr(src, PD)
        rep = verify_kl_bound(kl_bound(alpha, speed=0.5), alpha, 50, seed=0, tol=1e-4)
        ok &= rep.passed
        margins.append(rep.margin)
        reports.append(rep.to_dict())
    wrong = verify_kl_bound(KLFunction.from_expr("s*exp(-10*t)"), ScalarGain.from_expr("s/10", PD), 50, seed=0, tol=1e-4)
    ok &= wrong.violated
    reports.append(wrong.to_dict())
    return ok, f"half-speed margins {[f'{m:.2e}' for m in margins]}, wrong candidate margin {wrong.margin:.3f}", reports


def criterion_4():
    b = benchmarks.get("scalar_iiss")
    xis, sigs = random_runs(b.system, 100, seed=0, radius=5.0, horizon=10.0, amplitude=2.0)
    bound, rep = sufficiency_pipeline(b.candidate, b.system, xis, sigs, 1e-3, 10.0, tol=1e-4)
    ok = rep.passed and float(np.max(np.abs(xis))) <= 5.0
    return ok, f"verdict {rep.verdict}, margin {rep.margin:.3e}, flow speed {bound.speed}", [rep.to_dict()]


def criterion_5():
    b = benchmarks.get("scalar_linear")
    w = WeightFunction.default()
    xis = np.random.default_rng(5).uniform(-5, 5, (20, 1))
    ok, reports, worst_upper = True, [], -np.inf
    for xi in xis:
        e = estimate_v0(b.system, b.gains, b.sigma, w, xi, 500, seed=0)
        r = abs(float(xi[0]))
        lo, hi = float(b.gains.alpha(r)), 2.0 * float(b.gains.beta(r, 0.0))
        zero = evaluate_candidate(b.system, b.gains, b.sigma, w, xi, InputSignal.zero(1, 1.0), 0.0, 1e-2)
        ok &= lo <= e.value <= hi * (1 + 1e-6) and zero == w.c1 * lo
        worst_upper = max(worst_upper, e.value / hi)
        reports.append(e.to_dict())
    return ok, f"20 estimates inside the sandwich, max V0/(2 beta(|xi|,0)) = {worst_upper:.4f}", reports


def criterion_6():
    good, bad = benchmarks.get("scalar_iiss"), benchmarks.get("unstable_scalar")
    X, U = differential_samples(good.system, 10_000)
    sigs = [InputSignal.constant(U[i], 1.0) for i in range(len(X))]
    d_good = check_decrease_differential(good.candidate, good.system, X, U, 1e-6)
    i_good = check_decrease_integral(good.candidate, good.system, X, sigs, 1e-2, 1.0, 1e-6)
    d_bad = check_decrease_differential(bad.candidate, bad.system, X, U, 1e-6)
    i_bad = check_decrease_integral(bad.candidate, bad.system, X, sigs, 1e-2, 1.0, 1e-6)
    cross_good = cross_check_forms(good.candidate, good.system, (X, U))
    cross_bad = cross_check_forms(bad.candidate, bad.system, (X, U))
    ok = d_good.passed and i_good.passed and d_bad.violated and i_bad.violated and cross_good.agree and cross_bad.agree
    detail = (
        f"scalar_iiss {d_good.verdict}/{i_good.verdict}, unstable {d_bad.verdict}/{i_bad.verdict}, "
        f"cross-check agree {cross_good.agree}/{cross_bad.agree}"
    )
    return ok, detail, [r.to_dict() for r in (d_good, i_good, d_bad, i_bad, cross_good, cross_bad)]


def criterion_7():
    b = benchmarks.get("scalar_iiss")
    gains = _derived_scalar_iiss_gains()
    dt, H = 1e-3, 10.0
    tol = 1e-6 + 10 * dt**4
    xis, sigs = random_runs(b.system, 50, seed=7, radius=5.0, horizon=H, amplitude=2.0)
    state, rep = run_norm_observer_batch(b.system, gains, xis, sigs, dt, H, tol)
    monotone = bool(np.all(np.diff(state.p, axis=1) >= 0))
    ok = rep.passed and monotone and state.p.shape[0] == 50
    detail = f"worst margin {rep.margin:.3e} (tol {tol:.1e}) over 50 runs, p nondecreasing {monotone}"
    return ok, detail, [rep.to_dict()]


def criterion_8():
    beta = KLFunction.from_expr("s*exp(-t)")
    t1 = settling_time_map(beta, [1.0], [0.5])(1.0, 0.5)
    smap = settling_time_map(beta, np.linspace(0.1, 2.0, 50), np.linspace(0.01, 1.0, 50))
    props = smap.check_properties()
    ok = abs(t1 - math.log(2)) <= 1e-6 and props["nonincreasing_in_eps"] and props["nondecreasing_in_r"] and props["continuous"]
    return ok, f"T_1(0.5) - ln 2 = {t1 - math.log(2):.2e}, 50x50 table checks {props}", [{"T1": t1, "props": props}]


def criterion_9():
    det, und = benchmarks.get("linear_detectable_2d"), benchmarks.get("linear_undetectable_2d")
    r_det = falsify(det.system, det.gains, budget=10_000, seed=0)
    r_und = falsify(und.system, und.gains, budget=10_000, seed=0)
    ok = r_det.verdict == "no_violation_found" and r_und.violated and r_und.samples <= 10_000
    return ok, f"detectable {r_det.verdict} at 10^4, undetectable {r_und.verdict} (margin {r_und.margin:.2f})", [r_det.to_dict(), r_und.to_dict()]


CRITERIA = {
    1: ("falsify reproduces the u_k counterexample", 5.0, criterion_1),
    2: ("comparison principle against closed-form oracle", 10.0, criterion_2),
    3: ("half-speed flow gate and wrong candidate", 30.0, criterion_3),
    4: ("sufficiency pipeline end to end", 60.0, criterion_4),
    5: ("V0 sandwich on the linear benchmark", 120.0, criterion_5),
    6: ("Lyapunov checker discrimination", 20.0, criterion_6),
    7: ("norm observer with derived gains", 10.0, criterion_7),
    8: ("settling-time map", 5.0, criterion_8),
    9: ("linear detectability sanity", 60.0, criterion_9),
}
# criterion 1 bounds each seed separately; its total covers five seeds
TOTAL_LIMIT = {1: 25.0}

_FIRST_RUN = {}


def run_criterion(k: int):
    title, limit, fn = CRITERIA[k]
    t0 = time.perf_counter()
    ok, detail, reports = fn()
    elapsed = time.perf_counter() - t0
    limit = TOTAL_LIMIT.get(k, limit)
    passed = bool(ok) and elapsed < limit
    line = f"criterion {k:2d} {'PASS' if passed else 'FAIL'} [{elapsed:6.2f} s < {limit:g} s] {title}: {detail}"
    return passed, line, dumps(reports)


@pytest.mark.parametrize("k", sorted(CRITERIA))
def test_criterion(k, capsys):
    passed, line, payload = run_criterion(k)
    _FIRST_RUN[k] = payload
    with capsys.disabled():
        print("\n" + line)
        if k == 7 and "seconds" in _DERIVED:
            print(f"             (includes {_DERIVED['seconds']:.2f} s deriving the gains through the sufficiency pipeline)")
    assert passed, line


def test_criterion_10_determinism(capsys):
    mismatched = []
    for k in sorted(CRITERIA):
        first = _FIRST_RUN.get(k)
        if first is None:
            first = run_criterion(k)[2]
        if run_criterion(k)[2] != first:
            mismatched.append(k)
    passed = not mismatched
    line = f"criterion 10 {'PASS' if passed else 'FAIL'} determinism: reports of criteria 1-9 repeat byte-identically" + (
        "" if passed else f" except {mismatched}"
    )
    with capsys.disabled():
        print("\n" + line)
    assert passed, line


if __name__ == "__main__":
    results = {}
    for k in sorted(CRITERIA):
        passed, line, payload = run_criterion(k)
        results[k] = payload
        print(line, flush=True)
    same = all(run_criterion(k)[2] == results[k] for k in sorted(CRITERIA))
    print(f"criterion 10 {'PASS' if same else 'FAIL'} determinism: reports of criteria 1-9 repeat byte-identically")
