import math

import numpy as np
import pytest
import sympy

from iioss_lab import benchmarks
from iioss_lab.bounds import IIOSSGains
from iioss_lab.errors import ArgumentError, HorizonError
from iioss_lab.funclib import KINF, KLFunction, ScalarGain, settling_time_map
from iioss_lab.sim import ControlSystem, InputSignal, norms
from iioss_lab.valfun import (
    WeightFunction,
    check_v0_decrease,
    continuity_spot_check,
    estimate_v0,
    estimates_csv,
    evaluate_candidate,
    integrand_values,
    input_budget,
    make_gamma2_tilde,
    time_cap,
    _prior,
    _render,
)

ID = ScalarGain.from_expr("s", KINF)
BETA = KLFunction.from_expr("s*exp(-t)")
W = WeightFunction.default()


def _lin():
    return benchmarks.get("scalar_linear")


def test_gamma2_tilde_cases():
    sq = ScalarGain.from_expr("s^2", KINF)
    g = make_gamma2_tilde(ID, sq)
    s = np.linspace(0, 100, 10_000)
    np.testing.assert_array_equal(g(s), np.maximum(s, s * s))
    assert np.all(g(s) >= ID(s)) and np.all(g(s) >= sq(s))
    half = ScalarGain.from_expr("s/2", KINF)
    np.testing.assert_array_equal(make_gamma2_tilde(ID, half)(s), s)


def test_input_budget():
    assert input_budget(0.0, BETA) == 0.0
    assert input_budget(2.0, BETA) == 2.0
    r = np.linspace(0, 10, 50)
    assert np.all(np.diff([input_budget(x, BETA) for x in r]) > 0)
    with pytest.raises(ArgumentError):
        input_budget(-1.0, BETA)


def test_time_cap_closed_form():
    settle = settling_time_map(BETA, [2.0], [0.25])
    assert time_cap(1.0, settle, ID, 1.0, 2.0) == pytest.approx(math.log(8.0), abs=1e-6)


def test_time_cap_monotone_and_bounded_below():
    xs = np.linspace(0.2, 5.0, 25)
    settle = settling_time_map(BETA, 2 * xs, [1.0])
    alpha = ScalarGain.from_expr("s/(1 + s)", KINF)
    caps = [time_cap(x, settle, alpha, 1.0, 2.0) for x in xs]
    assert np.all(np.diff(caps) > 0)
    # closed form ln(r/eps) with r = 2x, eps = (1/2) (x/2)/(1 + x/2)
    np.testing.assert_allclose(caps, np.log(4 * (2 + xs)), atol=1e-6)
    with pytest.raises(HorizonError):
        time_cap(0.05, settle, alpha, 1.0, 2.0)
    with pytest.raises(ArgumentError):
        time_cap(0.0, settle, alpha, 1.0, 2.0)


def test_default_weight_against_symbolic_derivative():
    t = sympy.symbols("t", nonnegative=True)
    k = (1 + 2 * t) / (1 + t)
    lam = sympy.diff(k, t)
    assert sympy.simplify(lam - 1 / (1 + t) ** 2) == 0
    assert sympy.limit(k, t, sympy.oo) == 2 and k.subs(t, 0) == 1
    assert sympy.simplify(sympy.diff(lam, t)) == sympy.simplify(-2 / (1 + t) ** 3)
    grid = np.linspace(0, 100, 1001)
    f = sympy.lambdify(t, lam, "numpy")
    np.testing.assert_allclose(W.derivative(grid), f(grid), rtol=1e-12)
    assert all(W.verify().values())


def test_weight_verify_rejects_bad_derivative():
    bad = WeightFunction.from_strings("(1 + 2*t)/(1 + t)", "1/(1 + t)", 1.0, 2.0)
    checks = bad.verify()
    assert checks["lambda_matches_k"] is False
    flat = WeightFunction.from_strings("1 + 0*t", "0*t", 1.0, 2.0)
    assert flat.verify()["k_increasing"] is False


def test_v0_sandwich_and_witness_on_linear_benchmark():
    b = _lin()
    rng = np.random.default_rng(0)
    for xi in rng.uniform(-5, 5, (20, 1)):
        e = estimate_v0(b.system, b.gains, b.sigma, W, xi, 100, seed=1)
        r = abs(float(xi[0]))
        assert e.lower_bound == W.c1 * r and e.upper_bound == W.c2 * r
        assert e.lower_bound <= e.value <= e.upper_bound * (1 + 1e-6)
        assert evaluate_candidate(b.system, b.gains, b.sigma, W, xi, e.witness_input, e.witness_time, 1e-2) == e.value
        zero = evaluate_candidate(b.system, b.gains, b.sigma, W, xi, InputSignal.zero(1, 1.0), 0.0, 1e-2)
        assert zero == e.lower_bound
        # analytic supremum: |x(t)| <= e^-t |xi| + int |u| gives V0 = sup_t e^-t k(t) |xi| = |xi|
        assert e.value == pytest.approx(r, rel=1e-12)


def test_v0_no_input_example():
    sys = ControlSystem.from_strings(["-x1"], ["x1"], 1, 1)
    gains = IIOSSGains(ID, BETA, ScalarGain.from_expr("s"), ID)
    e = estimate_v0(sys, gains, ID, W, [1.0], 50, seed=0)
    assert 1.0 <= e.value <= 2.0


def test_v0_at_origin_is_zero():
    b = _lin()
    e = estimate_v0(b.system, b.gains, b.sigma, W, [0.0], 50, seed=0)
    assert e.value == 0.0 and e.witness_time == 0.0


def test_v0_budget_monotone():
    b = benchmarks.get("scalar_iiss")
    gains = b.gains
    for xi in ([0.5], [2.0], [-3.0]):
        small = estimate_v0(b.system, gains, b.sigma, W, xi, 100, seed=4)
        large = estimate_v0(b.system, gains, b.sigma, W, xi, 200, seed=4)
        assert large.value >= small.value


def test_v0_requires_positive_budget():
    b = _lin()
    with pytest.raises(ArgumentError):
        estimate_v0(b.system, b.gains, b.sigma, W, [1.0], 0, seed=0)


def test_over_budget_inputs_have_nonpositive_integrand():
    b = _lin()
    g2t = make_gamma2_tilde(b.gains.gamma2, b.sigma)
    rng = np.random.default_rng(3)
    dt, H = 1e-2, 3.0
    for r in (0.5, 1.0, 3.0):
        budget = input_budget(r, b.gains.beta)
        params = _prior(rng, 60, int(H / dt), 1, 8)
        sigs = _render(params, 4.0 * budget, g2t, dt, H, None)
        xis = np.full((60, 1), r)
        J, tb = integrand_values(b.system, b.gains, g2t, W, xis, sigs, dt, H)
        spent = tb.integrals["g2"] / 2.0  # cumulative gamma2~ energy
        over = spent > budget
        assert np.any(over)
        assert np.all(J[over] <= 1e-9)


def test_decrease_at_origin_and_tau_guard():
    b = _lin()
    v = InputSignal.constant([0.5], 1.0)
    rep = check_v0_decrease(b.system, b.gains, b.sigma, W, [[0.0]], [v], 0.1, 50, seed=0)
    assert rep.verdict == "consistent"
    rhs = rep.details["rhs"]
    # c2 * int_0^tau 2 gamma2~(|v|) on the grid
    assert rhs == pytest.approx(2.0 * 2.0 * 0.5 * 0.1, rel=1e-9)
    with pytest.raises(ArgumentError):
        check_v0_decrease(b.system, b.gains, b.sigma, W, [[1.0]], [v], 1.0, 50, seed=0)


def test_decrease_linear_zero_input_and_seed_stability():
    b = _lin()
    xis = [[1.0], [-2.0], [0.5]]
    zeros = [InputSignal.zero(1, 1.0)] * 3
    margins = []
    for seed in range(6):
        rep = check_v0_decrease(b.system, b.gains, b.sigma, W, xis, zeros, 0.1, 50, seed=seed)
        assert rep.verdict == "consistent"
        margins.append(rep.margin)
    ref = np.array(margins[:5])
    assert abs(margins[5] - ref.mean()) <= 3 * ref.std() + 1e-12


def test_continuity_gaps_shrink_with_radius():
    b = benchmarks.get("scalar_iiss")
    gaps = []
    for radius in (1e-1, 1e-2, 1e-3):
        rep = continuity_spot_check(b.system, b.gains, b.sigma, W, [1.5], radius, 4, 60, seed=2)
        gaps.append(rep.details["max_gap"])
    assert gaps[0] > gaps[1] > gaps[2]


def test_continuity_probe_at_xi_and_witness_transfer():
    b = benchmarks.get("scalar_iiss")
    rep = continuity_spot_check(b.system, b.gains, b.sigma, W, [1.5], 0.1, 2, 60, seed=2, probe_points=[[1.5], [1.6]])
    assert rep.details["gaps"][0] == 0.0
    transfers = rep.details["transferred_witness_values"]
    assert transfers[0] == rep.details["value_at_xi"]
    # further from the origin the budget grows, so the witness stays admissible
    assert transfers[1] is not None
    assert transfers[1] <= W.c2 * float(b.gains.beta(1.6, 0.0)) * (1 + 1e-6)
    with pytest.raises(ArgumentError):
        continuity_spot_check(b.system, b.gains, b.sigma, W, [1.5], 0.1, 1, 10, seed=0)


def test_estimates_csv_header():
    b = _lin()
    est = [estimate_v0(b.system, b.gains, b.sigma, W, [x], 10, seed=0) for x in (1.0, 2.0)]
    lines = estimates_csv(est).splitlines()
    assert lines[0] == "xi1,V0,lower,upper,witness_time"
    assert len(lines) == 3
    assert norms(np.array([[2.0]]))[0] == float(lines[2].split(",")[0])
