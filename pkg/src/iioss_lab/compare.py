"""Scalar comparison principle: solvers, dominance, the flow-based KL bound and the
pipeline turning a Lyapunov certificate into a trajectory bound."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_simpson

from .bounds import IIOSSGains, check_iioss
from .errors import ArgumentError, HorizonError, KindError, SaturationError
from .funclib import (
    DEFAULT_GRID,
    PD,
    FactorizationResult,
    KLFunction,
    ScalarGain,
    factorize_positive_definite,
    gain_grid,
    invert,
    verify_kind,
    verify_kl,
)
from .lyap import LyapunovCandidate, check_decrease_integral, check_sandwich
from .report import HOLDS, INCONCLUSIVE, VIOLATED, CertificateReport
from .sim import ControlSystem, InputSignal, integrate_batch, n_steps, norms, sample_inputs

FLOW_POINTS = 20_000
FLOW_SPEEDS = (0.5, 0.25, 0.125)


def lipschitz_minorant(alpha: ScalarGain, points: int = DEFAULT_GRID, sub: int = 8) -> ScalarGain:
    """Piecewise-linear function below ``alpha`` on its range.

    Node values are the minimum of alpha over the two adjacent cells, so each
    linear piece lies below alpha on its cell.
    """
    grid = gain_grid(alpha.domain_cap, points)
    frac = np.linspace(0.0, 1.0, sub + 1)
    cell_min = np.min(alpha(grid[:-1, None] + frac[None, :] * np.diff(grid)[:, None]), axis=1)
    node = np.empty_like(grid)
    node[0] = 0.0
    node[1:-1] = np.minimum(cell_min[:-1], cell_min[1:])
    node[-1] = cell_min[-1]
    node = np.maximum(node, 0.0)

    def fn(s, _g=grid, _v=node):
        return np.interp(np.asarray(s, float), _g, _v)

    return ScalarGain(fn, alpha.kind, alpha.domain_cap, f"lipschitz minorant of {alpha.name}")


@dataclass(frozen=True, eq=False)
class ComparisonInstance:
    """w' = -alpha(w) + v(t), w(0) = y0."""

    alpha: ScalarGain
    v: InputSignal
    y0: float
    horizon: float
    lipschitz: bool = True

    def __post_init__(self):
        if self.v.m != 1:
            raise ArgumentError("comparison forcing v must be scalar")
        if np.any(self.v.values < 0):
            raise ArgumentError("comparison forcing v must be nonnegative")
        if not self.y0 >= 0:
            raise ArgumentError("y0 must be nonnegative")
        if self.horizon < 0:
            raise ArgumentError("horizon must be nonnegative")

    def effective_alpha(self) -> ScalarGain:
        return self.alpha if self.lipschitz else lipschitz_minorant(self.alpha)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.to_dict(),
            "v": self.v.to_dict(),
            "y0": self.y0,
            "horizon": self.horizon,
            "lipschitz": self.lipschitz,
        }


@dataclass(frozen=True, eq=False)
class ScalarTrajectory:
    times: np.ndarray
    w: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t", "w"])
        for t, w in zip(self.times, self.w):
            wr.writerow([repr(float(t)), repr(float(w))])
        return buf.getvalue()


def solve_comparison_batch(alpha: ScalarGain, y0s, signals, dt: float, horizon: float, forcing: float = 0.0):
    """RK4 for w' = -alpha(w) + v + forcing over a batch sharing alpha; w clamped at 0."""
    y0s = np.asarray(y0s, float).reshape(-1)
    N = n_steps(dt, horizon)
    V = sample_inputs(signals, 1, dt, N)[:, :, 0] + forcing
    W = np.empty((len(y0s), N + 1))
    W[:, 0] = y0s
    w = y0s.copy()
    h2, h6 = 0.5 * dt, dt / 6.0

    def rhs(x, v):
        return -alpha(np.maximum(x, 0.0)) + v

    for i in range(N):
        v = V[:, i]
        k1 = rhs(w, v)
        k2 = rhs(w + h2 * k1, v)
        k3 = rhs(w + h2 * k2, v)
        k4 = rhs(w + dt * k3, v)
        w = np.maximum(w + h6 * (k1 + 2 * k2 + 2 * k3 + k4), 0.0)
        W[:, i + 1] = w
    return np.arange(N + 1) * dt, W, V - forcing


def solve_comparison(inst: ComparisonInstance, dt: float = 1e-3) -> ScalarTrajectory:
    t, W, _ = solve_comparison_batch(inst.effective_alpha(), [inst.y0], [inst.v], dt, inst.horizon)
    return ScalarTrajectory(t, W[0])


def solve_perturbed(inst: ComparisonInstance, n: int, dt: float = 1e-3) -> ScalarTrajectory:
    """Same solver with the constant forcing 1/n added."""
    if int(n) != n or n < 1:
        raise ArgumentError("n must be a positive integer")
    t, W, _ = solve_comparison_batch(inst.effective_alpha(), [inst.y0], [inst.v], dt, inst.horizon, 1.0 / n)
    return ScalarTrajectory(t, W[0])


def verify_dominance(
    y_times, y_values, inst: ComparisonInstance, dt: float = 1e-3, tol: float = 1e-6, n: int | None = None
) -> CertificateReport:
    """y <= w pointwise on the solver grid, with w solving the comparison equation
    (or its 1/n-perturbed version)."""
    sol = solve_comparison(inst, dt) if n is None else solve_perturbed(inst, n, dt)
    y_times = np.asarray(y_times, float)
    y = np.asarray(y_values, float)
    if y_times.shape != sol.times.shape or y.shape != sol.times.shape:
        raise ArgumentError(f"trace has {y.size} points, the solver grid has {sol.times.size}")
    if np.max(np.abs(y_times - sol.times)) > 1e-9 * max(1.0, inst.horizon):
        raise ArgumentError("trace times do not match the solver grid")
    if abs(y[0] - inst.y0) > 1e-9 * max(1.0, inst.y0):
        raise ArgumentError("trace must start at y0")
    diff = y - sol.w
    k = int(np.argmax(diff))
    margin = float(diff[k])
    return CertificateReport(
        "dominance",
        HOLDS if margin <= tol else VIOLATED,
        margin,
        tol,
        {"time": float(sol.times[k]), "y": float(y[k]), "w": float(sol.w[k])},
        len(y),
        tolerances={"dt": dt},
        details={"perturbation_n": n},
    )


# ---------------------------------------------------------------------------
# KL bound from a slowed comparison flow


def kl_bound(
    alpha: ScalarGain,
    s_grid=None,
    t_grid=None,
    speed: float = 0.5,
    points: int = FLOW_POINTS,
) -> KLFunction:
    """beta(s, t) = flow at time t of w' = -speed*alpha(w) from w(0) = s.

    Tabulated through G(z) = int_z^cap dz' / (speed*alpha(z')), computed in
    log-space with Simpson's rule; beta(s, t) solves G(beta) = G(s) + t.
    Outside the table the log-space map is continued linearly. Without
    ``t_grid`` the time range is the time the flow needs to fall from the cap
    to a hundredth of it.
    """
    if not verify_kind(alpha, kind=PD):
        raise KindError(f"alpha {alpha.name!r} is not positive definite")
    cap = alpha.domain_cap if s_grid is None else float(np.max(s_grid))
    t_cap = None if t_grid is None else float(np.max(t_grid))
    u = np.linspace(np.log(cap) - 12 * np.log(10.0), np.log(cap), points)
    z = np.exp(u)
    rate = speed * alpha(z)
    if np.any(~np.isfinite(rate)) or np.any(rate <= 0):
        raise HorizonError(f"flow of {alpha.name!r} is undefined: alpha must be finite and positive on (0, cap]")
    phi = z / rate
    G = cumulative_simpson(phi, dx=u[1] - u[0], initial=0.0)
    H = G[-1] - G  # decreasing in u, H(u_max) = 0
    if np.any(np.diff(H) >= 0):
        raise HorizonError(f"flow table for {alpha.name!r} is not monotone")
    Hr, ur = H[::-1], u[::-1]
    phi_lo, phi_hi = phi[0], phi[-1]

    def H_of(lu):
        inside = np.interp(lu, u, H)
        below = H[0] + (u[0] - lu) * phi_lo
        above = -(lu - u[-1]) * phi_hi
        return np.where(lu < u[0], below, np.where(lu > u[-1], above, inside))

    def u_of(h):
        inside = np.interp(h, Hr, ur)
        below = u[0] - (h - H[0]) / phi_lo
        above = u[-1] - h / phi_hi
        return np.where(h > H[0], below, np.where(h < 0, above, inside))

    if t_cap is None:
        # long enough for the flow from the cap to fall by two decades
        t_cap = float(H_of(np.log(cap / 100.0)))

    def fn(s, t):
        s, t = np.broadcast_arrays(np.asarray(s, float), np.asarray(t, float))
        pos = s > 0
        lu = np.log(np.where(pos, s, 1.0))
        out = np.exp(u_of(H_of(lu) + t))
        out = np.where(t <= 0, s, out)
        return np.where(pos, out, 0.0)

    return KLFunction(fn, cap, t_cap, f"flow of w' = -{speed!r}*({alpha.name})")


def kl_table_csv(beta: KLFunction, s_grid, t_grid) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["s", "t", "beta"])
    s_grid = np.asarray(s_grid, float)
    t_grid = np.asarray(t_grid, float)
    tab = beta(s_grid[:, None], t_grid[None, :])
    for i, s in enumerate(s_grid):
        for j, t in enumerate(t_grid):
            wr.writerow([repr(float(s)), repr(float(t)), repr(float(tab[i, j]))])
    return buf.getvalue()


def random_instances(
    alpha: ScalarGain,
    count: int,
    seed: int,
    dt: float,
    horizon: float,
    y0_max: float | None = None,
    energy_max: float | None = None,
    segments: int = 8,
):
    """Random (y0, v) pairs: zero, impulse, constant and piecewise forcing in turn.

    Breakpoints sit on the dt grid so that the forcing is resolved exactly.
    The total forcing energy is at most ``energy_max``.
    """
    rng = np.random.default_rng(seed)
    cap = alpha.domain_cap
    y0_max = cap / 4 if y0_max is None else y0_max
    energy_max = cap / 4 if energy_max is None else energy_max
    N = n_steps(dt, horizon)
    y0s = np.exp(rng.uniform(np.log(1e-3 * y0_max), np.log(y0_max), count))
    sigs = []
    for j in range(count):
        energy = energy_max * rng.uniform(0.01, 1.0)
        family = j % 4
        if family == 0:
            sigs.append(InputSignal.zero(1, horizon))
        elif family == 1:
            w = int(np.clip(np.exp(rng.uniform(0, np.log(N))), 1, N - 1))
            sigs.append(InputSignal.impulse([energy / (w * dt)], w * dt, horizon))
        elif family == 2:
            sigs.append(InputSignal.constant([energy / horizon], horizon))
        else:
            cuts = np.unique(np.sort(rng.choice(np.arange(1, N), size=segments - 1, replace=False)))
            bp = np.concatenate([[0], cuts])
            lens = np.diff(np.append(bp, N)) * dt
            share = rng.dirichlet(np.ones(len(bp))) * (rng.random(len(bp)) < 0.7)
            vals = energy * share / lens
            sigs.append(InputSignal(bp * dt, vals[:, None], horizon))
    return y0s, sigs


def verify_kl_bound(
    beta: KLFunction,
    alpha: ScalarGain,
    random_instances_count: int = 50,
    seed: int = 0,
    dt: float = 1e-2,
    horizon: float = 10.0,
    tol: float = 1e-4,
    shrink: float = 1.0,
) -> CertificateReport:
    """Check y(t) <= beta(y(0), t) + int_0^t 2 v on random comparison instances.

    y is the comparison solution itself, scaled by ``shrink``.
    """
    y0s, sigs = random_instances(alpha, random_instances_count, seed, dt, horizon)
    t, W, V = solve_comparison_batch(alpha, y0s, sigs, dt, horizon)
    Y = shrink * W
    forcing = np.zeros_like(Y)
    forcing[:, 1:] = np.cumsum(2.0 * V * dt, axis=1)
    diff = Y - beta(Y[:, :1], t[None, :]) - forcing
    b, k = np.unravel_index(int(np.argmax(diff)), diff.shape)
    margin = float(diff[b, k])
    return CertificateReport(
        "kl_bound",
        HOLDS if margin <= tol else VIOLATED,
        margin,
        tol,
        {"xi": [float(Y[b, 0])], "input": sigs[b].to_dict(), "time": float(t[k]), "index": int(b)},
        random_instances_count,
        tolerances={"dt": dt},
        details={"beta": beta.name, "alpha": alpha.name, "seed": seed, "shrink": shrink},
    )


# ---------------------------------------------------------------------------
# certificate -> trajectory bound


@dataclass(frozen=True, eq=False)
class SufficiencyBound:
    rho_tilde: ScalarGain
    beta_out: KLFunction
    doubled_sigma1: ScalarGain
    doubled_sigma2: ScalarGain
    alpha: ScalarGain
    flow: KLFunction
    speed: float
    factorization: FactorizationResult

    def as_iioss_gains(self) -> IIOSSGains:
        return IIOSSGains(self.alpha, self.beta_out, self.doubled_sigma1, self.doubled_sigma2)


def rho_tilde(cand: LyapunovCandidate, fac: FactorizationResult) -> ScalarGain:
    """rho1(alpha_upper^{-1}(s)) * rho2(alpha_lower^{-1}(s))."""
    cap = min(float(cand.alpha_upper(cand.alpha_upper.domain_cap)), float(cand.alpha_lower(cand.alpha_lower.domain_cap)))

    def fn(s, tol=1e-10):
        shape = np.shape(s)
        s = np.atleast_1d(np.asarray(s, float)).ravel()
        x_up = invert(cand.alpha_upper, s, tol=tol)
        # reuse x_up wherever it already passes the inversion test for alpha_lower
        x_lo = x_up.copy()
        redo = (np.abs(cand.alpha_lower(x_up) - s) > tol * np.maximum(s, 1e-300)) & (s > 0)
        if np.any(redo):
            x_lo[redo] = invert(cand.alpha_lower, s[redo], tol=tol)
        return (fac.rho1(x_up) * fac.rho2(x_lo)).reshape(shape)

    return ScalarGain(fn, PD, cap, f"rho1(au^-1(s))*rho2(al^-1(s)) for V={cand.V}")


def build_sufficiency_bound(
    cand: LyapunovCandidate,
    speeds=FLOW_SPEEDS,
    kl_instances: int = 50,
    seed: int = 0,
    tol: float = 1e-4,
    horizon: float = 10.0,
):
    """Factorize kappa, form rho_tilde and gate flow candidates through verify_kl_bound.

    Returns the bound and the list of gate reports (one per speed tried).
    """
    fac = factorize_positive_definite(cand.kappa)
    rt = rho_tilde(cand, fac)
    gates = []
    for speed in speeds:
        flow = kl_bound(rt, speed=speed)
        if not verify_kl(flow):
            gates.append(None)
            continue
        gate = verify_kl_bound(flow, rt, kl_instances, seed, horizon=horizon, tol=tol)
        gates.append(gate)
        if gate.passed:
            break
    else:
        raise HorizonError(f"no flow candidate passed the KL gate at speeds {tuple(speeds)}")

    def beta_fn(s, t, _f=flow, _a=cand.alpha_upper):
        return _f(_a(np.asarray(s, float)), t)

    beta_out = KLFunction(beta_fn, cand.alpha_upper.domain_cap, None, f"{flow.name} at alpha_upper(s)")
    bound = SufficiencyBound(
        rt,
        beta_out,
        cand.sigma1.scaled(2.0, f"2*({cand.sigma1.name})"),
        cand.sigma2.scaled(2.0, f"2*({cand.sigma2.name})"),
        cand.alpha_lower,
        flow,
        speed,
        fac,
    )
    return bound, gates


def sufficiency_pipeline(
    cand: LyapunovCandidate,
    sys: ControlSystem,
    xi_samples,
    input_samples,
    dt: float = 1e-3,
    horizon: float = 10.0,
    tol: float = 1e-4,
    speeds=FLOW_SPEEDS,
    seed: int = 0,
    jobs: int = 1,
) -> tuple[SufficiencyBound, CertificateReport]:
    """Turn a certificate into alpha_lower(|x|) <= beta(alpha_upper(|xi|), t) + int 2 sigma1 + 2 sigma2
    and test that bound on the sampled runs."""
    xis = np.atleast_2d(np.asarray(xi_samples, float))
    # the comparison runs on V values up to alpha_upper(|xi|), which rho_tilde must invert
    au, al = cand.alpha_upper, cand.alpha_lower
    need = float(au(float(np.max(norms(xis))))) if len(xis) else 0.0
    for g in (au, al):
        top = float(g(g.domain_cap))
        if need > top:
            raise SaturationError(
                f"alpha_upper(|xi|) = {need!r} exceeds {g.name!r} at its cap ({top!r}); rho_tilde cannot invert it",
                g.name,
            )
    sand = check_sandwich(cand, points=xis)
    dec = check_decrease_integral(cand, sys, xis, input_samples, dt, horizon, jobs=jobs)
    bound, gates = build_sufficiency_bound(cand, speeds, seed=seed)
    rep = check_iioss(sys, bound.as_iioss_gains(), xis, input_samples, dt, horizon, tol, jobs)
    rep.check = "sufficiency"
    rep.details.update(
        {
            "speed": bound.speed,
            "kl_gate_margins": [None if g is None else g.margin for g in gates],
            "sandwich": sand.verdict,
            "decrease_integral": dec.verdict,
            "factorization_excess": bound.factorization.max_excess,
        }
    )
    if not (sand.passed and dec.passed):
        rep.verdict = INCONCLUSIVE
        rep.notes.append("candidate failed its own checks on these samples; the bound is not derived")
    return bound, rep


def lyapunov_trace(cand: LyapunovCandidate, sys: ControlSystem, xi, u: InputSignal, dt: float, horizon: float):
    """V along a trajectory together with a piecewise-constant forcing v >= sigma1(|y|) + sigma2(|u|).

    The output part takes the larger endpoint value on each step.
    """
    tb = integrate_batch(sys, [np.asarray(xi, float).reshape(-1)], [u], dt, horizon)
    X, Y, U = tb.states[0], tb.outputs[0], tb.inputs[0]
    V = cand.values(X)
    s1 = cand.sigma1(norms(Y))
    v = np.maximum(s1[:-1], s1[1:]) + cand.sigma2(norms(U))
    sig = InputSignal(tb.times[:-1], v[:, None], horizon) if len(v) else InputSignal.zero(1, 0.0)
    return tb.times, V, sig
