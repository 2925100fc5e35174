"""Sampled estimates of the explicit value-function construction

    V0(xi) = sup_u sup_{t <= T_xi} (alpha(|x(t)|) - int_0^t gamma1(|y|) - int_0^t 2 gamma2~(|u|)) * k(t)

over inputs whose gamma2~-energy is at most beta(|xi|, 0). Every sampled value is
a lower bound of the supremum.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .bounds import IIOSSGains
from .dsl import Expression, parse
from .errors import ArgumentError, HorizonError
from .funclib import K, ScalarGain, SettlingTimeMap, invert, settling_time_map, verify_kind
from .report import CONSISTENT, INCONSISTENT, CertificateReport, ComparisonReport
from .sim import (
    ControlSystem,
    InputSignal,
    Quadrature,
    concatenate,
    input_energy,
    integrate,
    integrate_batch,
    n_steps,
    norms,
)

POPULATION = 50
SEGMENTS = 8
ELITE_FRACTION = 0.2


@dataclass(frozen=True, eq=False)
class WeightFunction:
    """Increasing weight k with values in [c1, c2] and strictly decreasing derivative lam."""

    k: Expression
    lam: Expression
    c1: float
    c2: float

    @classmethod
    def from_strings(cls, k: str, lam: str, c1: float, c2: float) -> "WeightFunction":
        return cls(parse(k, scalars=("t",)), parse(lam, scalars=("t",)), float(c1), float(c2))

    @classmethod
    def default(cls) -> "WeightFunction":
        return cls.from_strings("(1 + 2*t)/(1 + t)", "1/(1 + t)^2", 1.0, 2.0)

    def __call__(self, t):
        t = np.asarray(t, float)
        return np.broadcast_to(self.k.batch(t=t), t.shape).astype(float)

    def derivative(self, t):
        t = np.asarray(t, float)
        return np.broadcast_to(self.lam.batch(t=t), t.shape).astype(float)

    def verify(self, t_cap: float = 100.0, points: int = 10_001) -> dict:
        t = np.linspace(0.0, t_cap, points)
        k, lam = self(t), self.derivative(t)
        h = 1e-5
        inner = t[(t >= h) & (t <= t_cap - h)]
        fd = (self(inner + h) - self(inner - h)) / (2 * h)
        return {
            "c1_below_c2": self.c1 < self.c2,
            "k_increasing": bool(np.all(np.diff(k) > 0)),
            "k_in_range": bool(np.all((k >= self.c1) & (k <= self.c2))),
            "lambda_positive": bool(np.all(lam > 0)),
            "lambda_decreasing": bool(np.all(np.diff(lam) < 0)),
            "lambda_matches_k": bool(np.max(np.abs(fd - self.derivative(inner))) <= 1e-6),
        }


def make_gamma2_tilde(gamma2: ScalarGain, sigma: ScalarGain) -> ScalarGain:
    """Pointwise max(gamma2, sigma)."""
    cap = min(gamma2.domain_cap, sigma.domain_cap)
    out = ScalarGain(
        lambda s, a=gamma2, b=sigma: np.maximum(a(s), b(s)), K, cap, f"max({gamma2.name}, {sigma.name})"
    )
    assert verify_kind(out, kind=K).passed, "max of two class-K functions must be class K"
    return out


def input_budget(r: float, beta) -> float:
    """beta(r, 0): the gamma2~-energy allowed for inputs from |xi| = r."""
    if r < 0:
        raise ArgumentError("r must be nonnegative")
    return float(beta(r, 0.0))


def time_cap(xi_norm: float, settle: SettlingTimeMap, alpha: ScalarGain, c1: float, c2: float) -> float:
    """T at r = 2|xi| and eps = (c1/c2) alpha(|xi|/2). Radii below the table are refused."""
    if not xi_norm > 0:
        raise ArgumentError("time cap needs |xi| > 0")
    r = 2.0 * xi_norm
    if r < float(np.min(settle.r_grid)) * (1 - 1e-12):
        raise HorizonError(f"r={r!r} lies below the settling table (min {float(np.min(settle.r_grid))!r})")
    eps = (c1 / c2) * float(alpha(xi_norm / 2.0))
    return float(settle(r, eps))


def settle_for(beta, xi_norm: float) -> SettlingTimeMap:
    """A one-cell settling map covering the radius needed at |xi|."""
    return settling_time_map(beta, [2.0 * xi_norm], [1.0])


@dataclass
class V0Estimate:
    xi: np.ndarray
    value: float
    witness_input: InputSignal
    witness_time: float
    lower_bound: float
    upper_bound: float
    sample_budget: int
    time_cap: float = 0.0
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "xi": np.asarray(self.xi).tolist(),
            "V0": self.value,
            "lower": self.lower_bound,
            "upper": self.upper_bound,
            "witness_time": self.witness_time,
            "witness_input": self.witness_input.to_dict(),
            "sample_budget": self.sample_budget,
            "time_cap": self.time_cap,
            "details": self.details,
        }


def estimates_csv(estimates) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = len(estimates[0].xi) if estimates else 0
    w.writerow([f"xi{i + 1}" for i in range(n)] + ["V0", "lower", "upper", "witness_time"])
    for e in estimates:
        w.writerow([repr(float(v)) for v in (*e.xi, e.value, e.lower_bound, e.upper_bound, e.witness_time)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# candidate inputs, parametrized relative to the energy budget


@dataclass
class _Params:
    frac: np.ndarray  # (P,) share of the energy budget used
    shares: np.ndarray  # (P, K) split of that energy over the segments
    dirs: np.ndarray  # (P, K, m) unit directions per segment
    steps: np.ndarray  # (P,) input support length in steps

    def take(self, idx) -> "_Params":
        return _Params(self.frac[idx], self.shares[idx], self.dirs[idx], self.steps[idx])


def _unit(rng, shape, m):
    d = rng.standard_normal((*shape, m))
    return d / np.maximum(np.linalg.norm(d, axis=-1, keepdims=True), 1e-300)


def _prior(rng, P, N, m, segs) -> _Params:
    """Impulse, constant and random piecewise families in rotation."""
    fam = np.arange(P) % 3
    frac = np.where(rng.random(P) < 0.3, 1.0, rng.random(P))
    steps = np.clip(np.floor(np.exp(rng.uniform(0.0, np.log(N) + 1e-12, P))), 1, N).astype(int)
    shares = rng.dirichlet(np.ones(segs), P)
    dirs = _unit(rng, (P, segs), m)
    one_hot = np.zeros(segs)
    one_hot[0] = 1.0
    shares = np.where((fam == 0)[:, None], one_hot, shares)
    shares = np.where((fam == 1)[:, None], 1.0 / segs, shares)
    steps = np.where(fam == 1, N, steps)
    dirs = np.where((fam == 1)[:, None, None], dirs[:, :1], dirs)
    return _Params(frac, shares, dirs, steps)


def _refine(rng, elite: _Params, P, N, m, segs) -> _Params:
    """Perturbed copies of elite members, plus a share of fresh prior draws."""
    pick = rng.integers(0, len(elite.frac), P)
    base = elite.take(pick)
    frac = np.clip(base.frac + 0.1 * rng.standard_normal(P), 0.0, 1.0)
    steps = np.clip(np.round(base.steps * np.exp(0.3 * rng.standard_normal(P))), 1, N).astype(int)
    shares = np.array([rng.dirichlet(50.0 * s + 0.05) for s in base.shares])
    d = base.dirs + 0.3 * rng.standard_normal(base.dirs.shape)
    dirs = d / np.maximum(np.linalg.norm(d, axis=-1, keepdims=True), 1e-300)
    fresh = _prior(rng, P, N, m, segs)
    mix = rng.random(P) < 0.2
    return _Params(
        np.where(mix, fresh.frac, frac),
        np.where(mix[:, None], fresh.shares, shares),
        np.where(mix[:, None, None], fresh.dirs, dirs),
        np.where(mix, fresh.steps, steps),
    )


def _render(p: _Params, energy: float, g2t: ScalarGain, dt: float, horizon: float, box) -> list:
    """Signals carrying frac*energy of gamma2~-energy (less where the gain saturates or the box clips)."""
    P, segs = p.shares.shape
    edges = []
    targets = []
    for j in range(P):
        e = np.unique(np.round(np.linspace(0, p.steps[j], segs + 1)).astype(int))
        edges.append(e)
        k = len(e) - 1
        share = p.shares[j, :k] / max(p.shares[j, :k].sum(), 1e-300)
        targets.append(p.frac[j] * energy * share * (1 - 1e-9) / (np.diff(e) * dt))
    flat = np.concatenate(targets) if targets else np.zeros(0)
    top = float(g2t(g2t.domain_cap))
    amps = np.full(flat.shape, float(g2t.domain_cap))
    ok = flat <= top
    if np.any(ok):
        amps[ok] = invert(g2t, flat[ok])
    sigs = []
    pos = 0
    for j in range(P):
        e = edges[j]
        k = len(e) - 1
        vals = amps[pos : pos + k, None] * p.dirs[j, :k]
        pos += k
        bp = e[:-1] * dt
        if e[-1] * dt < horizon - 1e-12:
            bp = np.append(bp, e[-1] * dt)
            vals = np.vstack([vals, np.zeros((1, vals.shape[1]))])
        if box is not None:
            vals = np.clip(vals, box[0], box[1])
        sigs.append(InputSignal(bp, vals, horizon))
    return sigs


def integrand_values(sys, gains, g2t, weight, xis, signals, dt, horizon):
    """(alpha(|x|) - int gamma1(|y|) - int 2 gamma2~(|u|)) * k(t) on the grid, plus the batch."""
    q = {
        "g1": Quadrature(state=lambda X: gains.gamma1(norms(sys.eval_h(X)))),
        "g2": Quadrature(input=lambda U: 2.0 * g2t(norms(U))),
    }
    tb = integrate_batch(sys, xis, signals, dt, horizon, q)
    J = (gains.alpha(norms(tb.states)) - tb.integrals["g1"] - tb.integrals["g2"]) * weight(tb.times)[None, :]
    return J, tb


def _best(J, tmask):
    vals = np.where(tmask[None, :] & np.isfinite(J), J, -np.inf)
    k = np.argmax(vals, axis=1)
    return vals[np.arange(len(k)), k], k


def evaluate_candidate(sys, gains, sigma, weight, xi, u: InputSignal, t: float, dt: float) -> float:
    """Integrand value of one (input, time) pair; reproduces stored witnesses."""
    g2t = make_gamma2_tilde(gains.gamma2, sigma)
    N = int(round(t / dt))
    J, _ = integrand_values(sys, gains, g2t, weight, np.atleast_2d(xi), [u.truncated(N * dt)], dt, N * dt)
    return float(J[0, N])


def _setup(sys, gains, sigma, weight, xi, dt, settle):
    xi = np.asarray(xi, float).reshape(-1)
    r = float(norms(xi[None, :])[0])
    g2t = make_gamma2_tilde(gains.gamma2, sigma)
    energy = input_budget(r, gains.beta)
    if r == 0:
        return xi, r, g2t, energy, 0.0, 0.0
    T = time_cap(r, settle or settle_for(gains.beta, r), gains.alpha, weight.c1, weight.c2)
    horizon = max(np.ceil(T / dt - 1e-9), 1.0) * dt
    return xi, r, g2t, energy, T, horizon


def estimate_v0(
    sys: ControlSystem,
    gains: IIOSSGains,
    sigma: ScalarGain,
    weight: WeightFunction,
    xi,
    budget: int,
    seed: int,
    dt: float = 1e-2,
    settle: SettlingTimeMap | None = None,
    segments: int = SEGMENTS,
) -> V0Estimate:
    """Elite-resampling search over admissible piecewise-constant inputs.

    Generations have a fixed size and always draw a full population, so a
    larger budget evaluates a superset of the candidates of a smaller one.
    The zero input is always candidate 0, which gives value >= k(0) alpha(|xi|).
    """
    if budget < 1:
        raise ArgumentError("budget must be at least 1")
    xi, r, g2t, energy, T, horizon = _setup(sys, gains, sigma, weight, xi, dt, settle)
    lower = weight.c1 * float(gains.alpha(r))
    upper = weight.c2 * float(gains.beta(r, 0.0))
    if r == 0:
        zero = InputSignal.zero(sys.m, 0.0)
        return V0Estimate(xi, 0.0, zero, 0.0, lower, upper, budget, 0.0, {"diverged": 0})
    N = n_steps(dt, horizon)
    tmask = np.arange(N + 1) * dt <= T + 1e-12
    rng = np.random.default_rng(seed)
    m = sys.m
    best_val, best_sig, best_t = -np.inf, None, 0.0
    scores, pool = [], []
    diverged = 0
    done = 0
    while done < budget:
        params = _prior(rng, POPULATION, N, m, segments) if not pool else _refine(
            rng, _elite(pool, scores), POPULATION, N, m, segments
        )
        take = min(POPULATION, budget - done)
        params = params.take(np.arange(take))
        sigs = _render(params, energy, g2t, dt, horizon, sys.input_box)
        if done == 0:
            sigs[0] = InputSignal.zero(m, horizon)
        J, tb = integrand_values(sys, gains, g2t, weight, np.repeat(xi[None, :], take, 0), sigs, dt, horizon)
        diverged += int(np.count_nonzero(tb.diverged_index >= 0))
        vals, k = _best(J, tmask)
        i = int(np.argmax(vals))
        if vals[i] > best_val:
            best_val, best_sig, best_t = float(vals[i]), sigs[i], float(tb.times[k[i]])
        pool.append(params)
        scores.append(vals)
        done += take
    witness = best_sig.truncated(best_t) if best_t > 0 else InputSignal.zero(m, 0.0)
    return V0Estimate(
        xi,
        best_val,
        witness,
        best_t,
        lower,
        upper,
        budget,
        T,
        {"energy_budget": energy, "diverged": diverged, "seed": seed, "dt": dt},
    )


def _elite(pool, scores) -> _Params:
    allp = _Params(
        np.concatenate([p.frac for p in pool]),
        np.concatenate([p.shares for p in pool]),
        np.concatenate([p.dirs for p in pool]),
        np.concatenate([p.steps for p in pool]),
    )
    s = np.concatenate(scores)
    count = max(1, int(ELITE_FRACTION * len(s)))
    return allp.take(np.argsort(-s, kind="stable")[:count])


# ---------------------------------------------------------------------------
# decrease and continuity diagnostics


def check_v0_decrease(
    sys: ControlSystem,
    gains: IIOSSGains,
    sigma: ScalarGain,
    weight: WeightFunction,
    xi_samples,
    v_inputs,
    tau: float,
    budget: int,
    seed: int,
    dt: float = 1e-2,
    tol: float = 1e-6,
) -> CertificateReport:
    """Statistical check of

        V0(x(tau)) - V0(xi) <= -(V0(xi)/c2) (k(T_xi + tau) - k(T_xi)) + c2 int_0^tau gamma1(|y|) + 2 gamma2~(|v|).

    Both V0 values are sampled lower bounds. V0(xi) is sharpened with the paired
    candidate v #_tau u*, where u* is the witness found at x(tau).
    """
    xis = np.atleast_2d(np.asarray(xi_samples, float))
    g2t = make_gamma2_tilde(gains.gamma2, sigma)
    c2 = weight.c2
    rows = []
    for i, xi in enumerate(xis):
        v = v_inputs[i].truncated(tau)
        r = float(norms(xi[None, :])[0])
        T = 0.0
        if r > 0:
            T = time_cap(r, settle_for(gains.beta, r), gains.alpha, weight.c1, weight.c2)
            if tau > 0.1 * T:
                raise ArgumentError(f"tau={tau!r} exceeds 0.1*T_xi={0.1 * T!r}")
        q = {
            "g1": Quadrature(state=lambda X: gains.gamma1(norms(sys.eval_h(X)))),
            "g2": Quadrature(input=lambda U: 2.0 * g2t(norms(U))),
        }
        run = integrate(sys, xi, v, dt, tau, q)
        x_tau = run.states[-1]
        cost = c2 * float(run.integrals["g1"][-1] + run.integrals["g2"][-1])
        after = estimate_v0(sys, gains, sigma, weight, x_tau, budget, seed, dt)
        if r == 0:
            before_val, paired = 0.0, None
            decay = 0.0
        else:
            before = estimate_v0(sys, gains, sigma, weight, xi, budget, seed, dt)
            before_val = before.value
            paired = None
            t_pair = tau + after.witness_time
            joined = concatenate(v, after.witness_input, tau)
            if t_pair <= T + 1e-12 and input_energy(joined, g2t) <= input_budget(r, gains.beta):
                paired = evaluate_candidate(sys, gains, sigma, weight, xi, joined, t_pair, dt)
                before_val = max(before_val, paired)
            decay = (before_val / c2) * float(weight(T + tau) - weight(T))
        lhs = after.value - before_val
        rhs = -decay + cost
        rows.append((lhs - rhs, i, lhs, rhs, paired))
    worst = max(rows, key=lambda row: row[0])
    margin, i, lhs, rhs, paired = worst
    return CertificateReport(
        "v0_decrease",
        CONSISTENT if margin <= tol else INCONSISTENT,
        float(margin),
        tol,
        {"xi": xis[i].tolist(), "input": v_inputs[i].truncated(tau).to_dict(), "time": tau},
        len(xis),
        tolerances={"dt": dt, "budget": budget},
        notes=["statistical: both sides use sampled lower bounds of V0"],
        details={"lhs": lhs, "rhs": rhs, "paired_value": paired, "margins": [row[0] for row in rows]},
    )


def _sphere(rng, count, n, radius):
    d = rng.standard_normal((count, n))
    return radius * d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)


def continuity_spot_check(
    sys: ControlSystem,
    gains: IIOSSGains,
    sigma: ScalarGain,
    weight: WeightFunction,
    xi,
    radius: float,
    probes: int,
    budget: int,
    seed: int,
    dt: float = 1e-2,
    probe_points=None,
) -> ComparisonReport:
    """Evaluate one fixed candidate pool at xi and at probes around it.

    Inputs are rendered relative to each point's energy budget and all points
    share xi's time cap. ``probe_points`` overrides the random sphere probes.
    """
    if probes < 2 and probe_points is None:
        raise ArgumentError("need at least two probes")
    xi, r, g2t, energy, T, horizon = _setup(sys, gains, sigma, weight, xi, dt, None)
    if r == 0:
        raise ArgumentError("continuity check needs xi != 0")
    rng = np.random.default_rng(seed)
    N = n_steps(dt, horizon)
    tmask = np.arange(N + 1) * dt <= T + 1e-12
    params = _prior(rng, budget, N, sys.m, SEGMENTS)
    pts = np.atleast_2d(probe_points) if probe_points is not None else xi + _sphere(rng, probes, sys.n, radius)

    def pool_value(p):
        e = input_budget(float(norms(p[None, :])[0]), gains.beta)
        sigs = _render(params, e, g2t, dt, horizon, sys.input_box)
        sigs[0] = InputSignal.zero(sys.m, horizon)
        J, _ = integrand_values(sys, gains, g2t, weight, np.repeat(p[None, :], len(sigs), 0), sigs, dt, horizon)
        vals, k = _best(J, tmask)
        i = int(np.argmax(vals))
        return float(vals[i]), sigs[i], float(k[i] * dt)

    base, wsig, wt = pool_value(xi)
    values, transfers = [], []
    for p in pts:
        val, _, _ = pool_value(p)
        values.append(val)
        within = input_energy(wsig, g2t) <= input_budget(float(norms(p[None, :])[0]), gains.beta) * (1 + 1e-12)
        transfers.append(evaluate_candidate(sys, gains, sigma, weight, p, wsig, wt, dt) if within else None)
    gaps = np.abs(np.asarray(values) - base)
    return ComparisonReport(
        "v0_continuity",
        None,
        {},
        f"max estimate gap {float(gaps.max())!r} within radius {radius!r}",
        {
            "radius": radius,
            "max_gap": float(gaps.max()),
            "gaps": gaps.tolist(),
            "value_at_xi": base,
            "probe_values": values,
            "transferred_witness_values": transfers,
            "time_cap": T,
        },
    )
