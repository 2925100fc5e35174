"""Control systems with outputs, piecewise-constant inputs and a fixed-step RK4 integrator."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dsl import DomainFault, Env, Expression, parse
from .errors import ArgumentError, IntegrationError, ModelError
from .funclib import ScalarGain, verify_kind
from .parallel import map_chunks
from .report import NO_VIOLATION, VIOLATED, CertificateReport

BLOWUP_CAP = 1e12


def norms(a: np.ndarray) -> np.ndarray:
    """Euclidean norm over the last axis; zero for empty vectors."""
    a = np.asarray(a, float)
    if a.shape[-1] == 0:
        return np.zeros(a.shape[:-1])
    if a.shape[-1] == 1:
        return np.abs(a[..., 0])
    return np.sqrt(np.sum(a * a, axis=-1))


# ---------------------------------------------------------------------------
# inputs


@dataclass(frozen=True, eq=False)
class InputSignal:
    """Piecewise-constant input: ``values[i]`` on ``[breakpoints[i], breakpoints[i+1])``.

    The last piece runs to ``horizon``; the signal is zero from ``horizon`` on.
    """

    breakpoints: np.ndarray
    values: np.ndarray
    horizon: float

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, float).reshape(-1)
        vals = np.asarray(self.values, float)
        if vals.ndim == 1:
            vals = vals.reshape(len(bp), -1) if len(bp) else vals.reshape(0, 1)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "horizon", float(self.horizon))
        if len(bp) == 0 or bp[0] != 0.0:
            raise ArgumentError("breakpoints must start at 0")
        if np.any(np.diff(bp) <= 0):
            raise ArgumentError("breakpoints must be strictly increasing")
        if vals.shape[0] != len(bp):
            raise ArgumentError("one value vector per breakpoint is required")
        if self.horizon < bp[-1] or (self.horizon == bp[-1] and self.horizon > 0):
            raise ArgumentError("horizon must lie beyond the last breakpoint")
        if not np.all(np.isfinite(vals)):
            raise ArgumentError("input values must be finite")

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @classmethod
    def constant(cls, value, horizon: float) -> "InputSignal":
        return cls(np.array([0.0]), np.atleast_1d(np.asarray(value, float))[None, :], horizon)

    @classmethod
    def zero(cls, m: int, horizon: float) -> "InputSignal":
        return cls.constant(np.zeros(m), horizon)

    @classmethod
    def impulse(cls, amplitude, width: float, horizon: float) -> "InputSignal":
        """``amplitude`` on [0, width), zero afterwards (the u_k family for amplitude k, width 1/k)."""
        amp = np.atleast_1d(np.asarray(amplitude, float))
        if width >= horizon:
            return cls.constant(amp, width)
        return cls(np.array([0.0, width]), np.stack([amp, np.zeros_like(amp)]), horizon)

    @classmethod
    def from_dict(cls, d: dict) -> "InputSignal":
        return cls(np.asarray(d["breakpoints"], float), np.asarray(d["values"], float), d["horizon"])

    def to_dict(self) -> dict:
        return {
            "breakpoints": self.breakpoints.tolist(),
            "values": self.values.tolist(),
            "horizon": self.horizon,
        }

    def ends(self) -> np.ndarray:
        return np.append(self.breakpoints[1:], self.horizon)

    def value_at(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, float))
        idx = np.searchsorted(self.breakpoints, t, side="right") - 1
        out = self.values[np.clip(idx, 0, None)]
        return np.where(((t >= self.horizon) | (t < 0))[:, None], 0.0, out)

    def snapped(self, dt: float) -> "InputSignal":
        """Round breakpoints and horizon to multiples of ``dt``."""
        bp = np.round(self.breakpoints / dt) * dt
        hz = np.round(self.horizon / dt) * dt
        keep = np.append(bp[1:] > bp[:-1], True) & (bp < hz)
        keep[0] = True
        bp, vals = bp[keep], self.values[keep]
        if hz <= bp[-1] and len(bp) > 1:
            bp, vals = bp[:-1], vals[:-1]
        if hz <= bp[-1]:
            hz = bp[-1] + dt if self.horizon > 0 else 0.0
        return InputSignal(bp, vals, hz)

    def truncated(self, t: float) -> "InputSignal":
        """Equal to this signal on [0, t) and zero afterwards."""
        if t >= self.horizon:
            return self
        if t <= 0:
            return InputSignal.zero(self.m, 0.0)
        keep = self.breakpoints < t
        return InputSignal(self.breakpoints[keep], self.values[keep], t)

    def within(self, box: tuple | None) -> bool:
        if box is None:
            return True
        lo, hi = np.asarray(box[0], float), np.asarray(box[1], float)
        return bool(np.all(self.values >= lo) and np.all(self.values <= hi))


def concatenate(v: InputSignal, u: InputSignal, tau: float) -> InputSignal:
    """``v #_tau u``: v on [0, tau], then u shifted right by tau."""
    if tau < 0:
        raise ArgumentError("tau must be nonnegative")
    if tau > v.horizon:
        raise ArgumentError("tau must not exceed the horizon of v")
    if v.m != u.m:
        raise ArgumentError("input dimensions differ")
    if tau == 0:
        return InputSignal(u.breakpoints.copy(), u.values.copy(), u.horizon)
    if u.horizon == 0:
        return v.truncated(tau)
    keep = v.breakpoints < tau
    bp = np.concatenate([v.breakpoints[keep], u.breakpoints + tau])
    vals = np.concatenate([v.values[keep], u.values])
    return InputSignal(bp, vals, tau + u.horizon)


def input_energy(u: InputSignal, gamma: ScalarGain) -> float:
    """Exact integral of gamma(|u(s)|) over the support of ``u``."""
    lengths = u.ends() - u.breakpoints
    return float(np.sum(gamma(norms(u.values)) * lengths))


# ---------------------------------------------------------------------------
# systems


@dataclass(frozen=True, eq=False)
class ControlSystem:
    """dx/dt = f(x, u), y = h(x) given by DSL expressions."""

    f: tuple
    h: tuple
    n: int
    m: int
    input_box: tuple | None = None
    name: str = ""
    check_origin: bool = True

    def __post_init__(self):
        object.__setattr__(self, "f", tuple(self.f))
        object.__setattr__(self, "h", tuple(self.h))
        if len(self.f) != self.n:
            raise ModelError(f"need {self.n} dynamics expressions, got {len(self.f)}")
        if any(e.depends_on("u") for e in self.h):
            raise ModelError("outputs may depend on the state only")
        if self.check_origin:
            f0 = self.eval_f(np.zeros((1, self.n)), np.zeros((1, self.m)))
            h0 = self.eval_h(np.zeros((1, self.n)))
            if np.any(np.abs(f0) > 1e-12) or np.any(np.abs(h0) > 1e-12):
                raise ModelError("require f(0, 0) = 0 and h(0) = 0")

    @property
    def p(self) -> int:
        return len(self.h)

    @classmethod
    def from_strings(
        cls,
        dynamics: Sequence[str],
        output: Sequence[str],
        n: int | None = None,
        m: int = 1,
        input_box=None,
        name: str = "",
    ) -> "ControlSystem":
        n = len(dynamics) if n is None else n
        f = [parse(src, n, m, scalars=()) for src in dynamics]
        h = [parse(src, n, 0, scalars=()) for src in output]
        box = None if input_box is None else (np.asarray(input_box[0], float), np.asarray(input_box[1], float))
        return cls(tuple(f), tuple(h), n, m, box, name)

    def to_dict(self) -> dict:
        d = {
            "n": self.n,
            "m": self.m,
            "dynamics": [e.src for e in self.f],
            "output": [e.src for e in self.h],
        }
        if self.input_box is not None:
            d["input_box"] = [np.asarray(self.input_box[0]).tolist(), np.asarray(self.input_box[1]).tolist()]
        return d

    def eval_f(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        env = Env(X.T, U.T)
        B = X.shape[0]
        out = np.empty((B, self.n))
        for i, e in enumerate(self.f):
            out[:, i] = e.eval_env(env)
        return out

    def eval_h(self, X: np.ndarray) -> np.ndarray:
        env = Env(X.T, ())
        out = np.empty((X.shape[0], self.p))
        for i, e in enumerate(self.h):
            out[:, i] = e.eval_env(env)
        return out


@dataclass(frozen=True)
class Quadrature:
    """Running integral of ``state(X) + input(U)`` along a trajectory.

    The state part is integrated with the RK4 weights; the input part is exact
    because inputs are held constant over each step.
    """

    state: Callable[[np.ndarray], np.ndarray] | None = None
    input: Callable[[np.ndarray], np.ndarray] | None = None


@dataclass(eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    outputs: np.ndarray
    inputs: np.ndarray  # inputs[i] acts on [times[i], times[i+1])
    dt: float
    xi: np.ndarray
    signal: InputSignal
    diverged_at: float | None = None
    integrals: dict = field(default_factory=dict)

    def input_rows(self) -> np.ndarray:
        last = self.signal.value_at([self.times[-1]])
        return np.concatenate([self.inputs, last], axis=0)

    def to_csv(self) -> str:
        n, p, m = self.states.shape[1], self.outputs.shape[1], self.inputs.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"x{i+1}" for i in range(n)] + [f"y{i+1}" for i in range(p)] + [f"u{i+1}" for i in range(m)])
        rows = self.input_rows()
        for k, t in enumerate(self.times):
            w.writerow([repr(float(v)) for v in (t, *self.states[k], *self.outputs[k], *rows[k])])
        return buf.getvalue()


@dataclass(eq=False)
class TrajectoryBatch:
    times: np.ndarray
    states: np.ndarray  # (B, N+1, n); NaN after divergence
    outputs: np.ndarray  # (B, N+1, p)
    inputs: np.ndarray  # (B, N, m)
    dt: float
    xis: np.ndarray
    signals: list
    diverged_index: np.ndarray  # (B,), -1 when the run stayed bounded
    integrals: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.states.shape[0]

    def trajectory(self, b: int) -> Trajectory:
        di = int(self.diverged_index[b])
        return Trajectory(
            self.times,
            self.states[b],
            self.outputs[b],
            self.inputs[b],
            self.dt,
            self.xis[b],
            self.signals[b],
            None if di < 0 else float(self.times[di]),
            {k: v[b] for k, v in self.integrals.items()},
        )


def n_steps(dt: float, horizon: float) -> int:
    if not dt > 0:
        raise ArgumentError("dt must be positive")
    if horizon < 0:
        raise ArgumentError("horizon must be nonnegative")
    N = int(round(horizon / dt))
    if abs(N * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ArgumentError(f"dt={dt!r} does not divide horizon={horizon!r}")
    return N


def sample_inputs(signals: Sequence[InputSignal], m: int, dt: float, N: int) -> np.ndarray:
    mid = (np.arange(N) + 0.5) * dt
    U = np.empty((len(signals), N, m))
    for b, sig in enumerate(signals):
        if sig.m != m:
            raise ArgumentError(f"input has dimension {sig.m}, system expects {m}")
        U[b] = sig.snapped(dt).value_at(mid) if N else np.empty((0, m))
    return U


def integrate_batch(
    sys: ControlSystem,
    xis,
    signals: Sequence[InputSignal],
    dt: float,
    horizon: float,
    quadratures: dict | None = None,
    blowup_cap: float = BLOWUP_CAP,
) -> TrajectoryBatch:
    """Classical RK4 with inputs held constant over each step, for a batch of runs."""
    xis = np.atleast_2d(np.asarray(xis, float))
    B = xis.shape[0]
    if xis.shape[1] != sys.n:
        raise ArgumentError(f"initial states must have dimension {sys.n}")
    if len(signals) != B:
        raise ArgumentError("one input signal per initial state is required")
    for sig in signals:
        if not sig.within(sys.input_box):
            raise ArgumentError("input leaves the admissible input set")
    N = n_steps(dt, horizon)
    quadratures = quadratures or {}
    U = sample_inputs(signals, sys.m, dt, N)
    states = np.full((B, N + 1, sys.n), np.nan)
    states[:, 0] = xis
    incr = {k: np.zeros((B, N)) for k in quadratures}
    diverged = np.full(B, -1, dtype=int)
    bad0 = ~np.isfinite(norms(xis)) | (norms(xis) > blowup_cap)
    diverged[bad0] = 0
    act = np.flatnonzero(~bad0)
    x = xis[act].copy()
    h2, h6 = 0.5 * dt, dt / 6.0

    for i in range(N):
        if len(act) == 0:
            break
        u = U[act, i]
        try:
            k1 = sys.eval_f(x, u)
            k2 = sys.eval_f(x + h2 * k1, u)
            k3 = sys.eval_f(x + h2 * k2, u)
            x4 = x + dt * k3
            k4 = sys.eval_f(x4, u)
            for name, q in quadratures.items():
                inc = 0.0
                if q.state is not None:
                    inc = h6 * (q.state(x) + 2.0 * q.state(x + h2 * k1) + 2.0 * q.state(x + h2 * k2) + q.state(x4))
                if q.input is not None:
                    inc = inc + dt * q.input(u)
                incr[name][act, i] = inc
        except DomainFault as exc:
            raise IntegrationError(str(exc), i * dt) from exc
        x = x + h6 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        nrm = norms(x)
        blown = ~np.isfinite(nrm) | (nrm > blowup_cap)
        if np.any(blown):
            rows = act[blown]
            diverged[rows] = i + 1
            keep_vals = np.where(np.isfinite(x[blown]), x[blown], np.nan)
            states[rows, i + 1] = keep_vals
            act = act[~blown]
            x = x[~blown]
        states[act, i + 1] = x

    integrals = {}
    for name, inc in incr.items():
        cum = np.zeros((B, N + 1))
        cum[:, 1:] = np.cumsum(inc, axis=1)
        for b in np.flatnonzero(diverged >= 0):
            cum[b, diverged[b] + 1 :] = np.nan
        integrals[name] = cum
    outputs = np.full((B, N + 1, sys.p), np.nan)
    flat = states.reshape(-1, sys.n)
    ok = np.all(np.isfinite(flat), axis=1)
    if np.any(ok):
        try:
            outputs.reshape(-1, sys.p)[ok] = sys.eval_h(flat[ok])
        except DomainFault as exc:
            raise IntegrationError(f"output map: {exc}", float("nan")) from exc
    return TrajectoryBatch(
        np.arange(N + 1) * dt, states, outputs, U, dt, xis, list(signals), diverged, integrals
    )


def integrate(
    sys: ControlSystem,
    xi,
    u: InputSignal,
    dt: float,
    horizon: float,
    quadratures: dict | None = None,
    blowup_cap: float = BLOWUP_CAP,
) -> Trajectory:
    """Single-run wrapper around :func:`integrate_batch`."""
    batch = integrate_batch(sys, [np.asarray(xi, float).reshape(-1)], [u], dt, horizon, quadratures, blowup_cap)
    return batch.trajectory(0)


# ---------------------------------------------------------------------------
# reachability envelopes


@dataclass(frozen=True, eq=False)
class ReachabilityEnvelope:
    """|x(t)| <= chi1(t) + chi2(|xi|) + chi3(int_0^t sigma(|u|)) + c.

    ``chi1=None`` stands for the zero function.
    """

    chi1: ScalarGain | None
    chi2: ScalarGain
    chi3: ScalarGain
    sigma: ScalarGain
    c: float = 0.0

    def verify(self) -> dict:
        gains = {"chi2": self.chi2, "chi3": self.chi3, "sigma": self.sigma}
        if self.chi1 is not None:
            gains["chi1"] = self.chi1
        return {k: verify_kind(g).passed for k, g in gains.items()}

    def to_dict(self) -> dict:
        return {
            "chi1": None if self.chi1 is None else self.chi1.to_dict(),
            "chi2": self.chi2.to_dict(),
            "chi3": self.chi3.to_dict(),
            "sigma": self.sigma.to_dict(),
            "c": self.c,
        }


def _envelope_chunk(sys, env, xis, sigs, dt, horizon):
    q = {"sigma": Quadrature(input=lambda U: env.sigma(norms(U)))}
    tb = integrate_batch(sys, xis, sigs, dt, horizon, q)
    lhs = norms(tb.states)
    chi1 = np.zeros_like(tb.times) if env.chi1 is None else env.chi1(tb.times)
    rhs = chi1[None, :] + env.chi2(norms(tb.xis))[:, None] + env.chi3(tb.integrals["sigma"]) + env.c
    return tb, lhs - rhs


def check_reachability_envelope(
    sys: ControlSystem,
    env: ReachabilityEnvelope,
    xi_samples,
    input_samples: Sequence[InputSignal],
    dt: float,
    horizon: float,
    tol: float = 1e-6,
    jobs: int = 1,
) -> CertificateReport:
    """Evaluate the envelope inequality along sampled runs."""
    xis = np.atleast_2d(np.asarray(xi_samples, float))
    verified = env.verify()
    results = map_chunks(
        lambda idx: _envelope_chunk(sys, env, xis[idx], [input_samples[i] for i in idx], dt, horizon),
        len(xis),
        jobs=jobs,
    )
    best = worst_witness(results, offsets=True)
    margin, b, k, diverged = best
    verdict = VIOLATED if diverged or margin > tol else NO_VIOLATION
    witness = {"xi": xis[b].tolist(), "input": input_samples[b].to_dict(), "time": k * dt}
    if diverged:
        witness["diverged"] = True
    return CertificateReport(
        "reachability_envelope",
        verdict,
        margin,
        tol,
        witness,
        len(xis),
        details={"gains_verified": verified, "envelope": env.to_dict()},
    )


def worst_witness(results, offsets: bool = True):
    """Merge per-chunk (batch, margins) pairs into (margin, global index, time index, diverged).

    Divergence dominates everything with margin +inf.
    """
    best = (-np.inf, 0, 0, False)
    offset = 0
    for tb, diff in results:
        div = np.flatnonzero(tb.diverged_index >= 0)
        if len(div):
            b = int(div[0])
            return (np.inf, offset + b, int(tb.diverged_index[b]), True)
        flat = np.argmax(diff)
        b, k = np.unravel_index(flat, diff.shape)
        if diff[b, k] > best[0]:
            best = (float(diff[b, k]), offset + int(b), int(k), False)
        offset += len(tb)
    return best


def random_runs(
    sys: ControlSystem,
    count: int,
    seed: int,
    radius: float = 1.0,
    horizon: float = 1.0,
    amplitude: float = 1.0,
    segments: int = 8,
):
    """Initial states uniform in the ball of ``radius`` and inputs with ``segments``
    equal pieces, each component uniform in [-amplitude, amplitude]."""
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((count, sys.n))
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
    xis = d * (radius * rng.random(count) ** (1.0 / max(sys.n, 1)))[:, None]
    bp = np.arange(segments) * (horizon / segments)
    sigs = []
    for _ in range(count):
        vals = rng.uniform(-amplitude, amplitude, (segments, sys.m))
        if sys.input_box is not None:
            vals = np.clip(vals, sys.input_box[0], sys.input_box[1])
        sigs.append(InputSignal(bp, vals, horizon))
    return xis, sigs
