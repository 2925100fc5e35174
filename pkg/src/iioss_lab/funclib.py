"""Comparison functions (K, K-infinity, L, KL, positive definite).

Membership is certified only numerically, on a sampled grid over a declared
range ``[0, domain_cap]``.
"""

from __future__ import annotations

import csv
import io
import weakref
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dsl import DomainFault, parse
from .errors import EvaluationError, HorizonError, KindError, SaturationError

K = "K"
KINF = "Kinf"
L = "L"
PD = "PositiveDefinite"
ZERO = "Zero"
KINDS = (K, KINF, L, PD, ZERO)

DEFAULT_CAP = 100.0
DEFAULT_GRID = 10_000


def gain_grid(cap: float, points: int = DEFAULT_GRID) -> np.ndarray:
    """Grid on [0, cap]: linear near zero, log-spaced above."""
    n_lin = max(2, points // 5)
    knee = cap * 1e-3
    lin = np.linspace(0.0, knee, n_lin)
    log = np.geomspace(knee, cap, max(2, points - n_lin))
    return np.unique(np.concatenate([lin, log]))


@dataclass(frozen=True, eq=False)
class ScalarGain:
    """A scalar function of one nonnegative argument with a declared kind."""

    fn: Callable[[np.ndarray], np.ndarray]
    kind: str = K
    domain_cap: float = DEFAULT_CAP
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise KindError(f"unknown gain kind {self.kind!r}")
        if not self.domain_cap > 0:
            raise ValueError("domain_cap must be positive")

    @classmethod
    def from_expr(cls, src: str, kind: str = K, domain_cap: float = DEFAULT_CAP) -> "ScalarGain":
        expr = parse(src, scalars=("s",))

        def fn(s, _e=expr):
            return _e.batch(s=s)

        return cls(fn, kind, domain_cap, src)

    @classmethod
    def zero(cls, domain_cap: float = DEFAULT_CAP) -> "ScalarGain":
        return cls(lambda s: np.zeros_like(np.asarray(s, float)), ZERO, domain_cap, "0")

    def __call__(self, s):
        s = np.asarray(s, float)
        with np.errstate(all="ignore"):
            if not s.ndim:
                return float(self.fn(s))
            out = self.fn(s)
            if isinstance(out, np.ndarray) and out.shape == s.shape and out.dtype == float:
                return out if out is not s else out.copy()
            return np.broadcast_to(np.asarray(out, float), s.shape).copy()

    def scaled(self, c: float, name: str | None = None) -> "ScalarGain":
        kind = ZERO if c == 0 or self.kind == ZERO else self.kind
        return ScalarGain(lambda s, f=self.fn: c * f(s), kind, self.domain_cap, name or f"{c!r}*({self.name})")

    def to_dict(self) -> dict:
        return {"expr": self.name, "kind": self.kind, "domain_cap": self.domain_cap}

    def __repr__(self) -> str:
        return f"ScalarGain({self.name!r}, kind={self.kind!r})"


@dataclass(frozen=True, eq=False)
class KLFunction:
    """beta(s, t): class K in s for each t, class L in t for each s."""

    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    domain_cap: float = DEFAULT_CAP
    t_cap: float | None = None
    name: str = ""

    @classmethod
    def from_expr(cls, src: str, domain_cap: float = DEFAULT_CAP, t_cap: float | None = None) -> "KLFunction":
        expr = parse(src, scalars=("s", "t"))

        def fn(s, t, _e=expr):
            return _e.batch(s=s, t=t)

        return cls(fn, domain_cap, t_cap, src)

    @property
    def time_cap(self) -> float:
        return self.domain_cap if self.t_cap is None else self.t_cap

    def __call__(self, s, t):
        s = np.asarray(s, float)
        t = np.asarray(t, float)
        shape = np.broadcast_shapes(s.shape, t.shape)
        with np.errstate(all="ignore"):
            out = np.broadcast_to(np.asarray(self.fn(s, t), float), shape)
        return out.copy() if shape else float(out)

    def to_dict(self) -> dict:
        return {"expr": self.name, "kind": "KL", "domain_cap": self.domain_cap, "t_cap": self.time_cap}

    def __repr__(self) -> str:
        return f"KLFunction({self.name!r})"


@dataclass
class MembershipReport:
    kind: str
    passed: bool
    clauses: dict = field(default_factory=dict)
    first_violation: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.passed

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "passed": self.passed,
            "clauses": self.clauses,
            "first_violation": self.first_violation,
            "notes": self.notes,
        }


def _record(rep: MembershipReport, clause: str, ok_mask, grid) -> None:
    ok_mask = np.asarray(ok_mask, bool)
    ok = bool(np.all(ok_mask))
    rep.clauses[clause] = ok
    if not ok:
        rep.first_violation[clause] = float(grid[np.argmin(ok_mask)])


def _finite_values(g: ScalarGain, grid: np.ndarray) -> np.ndarray:
    try:
        vals = g(grid)
    except DomainFault as exc:
        raise EvaluationError(f"gain {g.name!r}: {exc}", exc.operand) from exc
    bad = ~np.isfinite(vals)
    if np.any(bad):
        raise EvaluationError(f"gain {g.name!r} is not finite", float(grid[np.argmax(bad)]))
    return vals


def saturates(g: ScalarGain, threshold: float = 0.5) -> bool:
    """Bounded-gain heuristic: the rise over the last decade below the cap is
    small compared with the rise over the decade before it."""
    cap = g.domain_cap
    a, b, c = g(np.array([cap / 100, cap / 10, cap]))
    rise_prev, rise_last = b - a, c - b
    return not (rise_last >= threshold * rise_prev)


def verify_kind(
    g: ScalarGain,
    grid_points: int = DEFAULT_GRID,
    kind: str | None = None,
    decay_fraction: float = 0.1,
    required_range: float | None = None,
    zero_tol: float = 1e-12,
) -> MembershipReport:
    """Check the declared (or given) kind of ``g`` on a grid over [0, domain_cap].

    K-infinity unboundedness cannot be observed on a bounded range; a gain is
    rejected as bounded when :func:`saturates` fires, or when
    ``required_range`` is given and exceeds the value at the cap.
    """
    if grid_points < 2:
        raise ValueError("grid_points must be at least 2")
    kind = kind or g.kind
    grid = gain_grid(g.domain_cap, grid_points)
    vals = _finite_values(g, grid)
    rep = MembershipReport(kind, True)
    d = np.diff(vals)
    if kind == ZERO:
        _record(rep, "zero", np.abs(vals) <= zero_tol, grid)
    elif kind in (K, KINF, PD):
        _record(rep, "zero_at_zero", [abs(vals[0]) <= zero_tol], grid[:1])
        _record(rep, "positive", vals[1:] > 0, grid[1:])
        if kind in (K, KINF):
            _record(rep, "strictly_increasing", d > 0, grid[1:])
        if kind == KINF:
            sat = saturates(g)
            rep.clauses["unbounded"] = not sat
            if sat:
                rep.first_violation["unbounded"] = float(g.domain_cap)
                rep.notes.append("saturation detected: gain looks bounded near the cap")
            if required_range is not None:
                reach = bool(vals[-1] >= required_range)
                rep.clauses["covers_required_range"] = reach
                if not reach:
                    rep.first_violation["covers_required_range"] = float(g.domain_cap)
    elif kind == L:
        _record(rep, "nonnegative", vals >= 0, grid)
        _record(rep, "nonincreasing", d <= 0, grid[1:])
        decays = bool(vals[-1] < decay_fraction * vals[0]) if vals[0] > 0 else False
        rep.clauses["decays"] = decays
        if not decays:
            rep.first_violation["decays"] = float(g.domain_cap)
        rep.notes.append("strict decrease is not certified numerically")
    else:
        raise KindError(f"cannot verify kind {kind!r}")
    rep.passed = all(rep.clauses.values())
    return rep


def require_kind(g: ScalarGain, *kinds: str) -> None:
    """Raise KindError unless ``g`` verifies as one of ``kinds``."""
    for kind in kinds:
        if verify_kind(g, kind=kind):
            return
    raise KindError(f"gain {g.name!r} does not verify as any of {kinds}")


def verify_kl(
    beta: KLFunction, s_points: int = 64, t_points: int = 64, decay_fraction: float = 0.1
) -> MembershipReport:
    """K checks in s for each sampled t and nonincreasing decay in t for each s."""
    s = gain_grid(beta.domain_cap, s_points)
    t = gain_grid(beta.time_cap, t_points)
    S, T = np.meshgrid(s, t, indexing="ij")
    vals = beta(S, T)
    rep = MembershipReport("KL", True)
    if not np.all(np.isfinite(vals)):
        i, j = np.argwhere(~np.isfinite(vals))[0]
        raise EvaluationError(f"KL function {beta.name!r} is not finite", float(s[i]))
    _record(rep, "zero_at_zero", np.abs(vals[0, :]) <= 1e-12, t)
    _record(rep, "increasing_in_s", np.all(np.diff(vals, axis=0) > 0, axis=1), s[1:])
    _record(rep, "nonincreasing_in_t", np.all(np.diff(vals, axis=1) <= 0, axis=0), t[1:])
    _record(rep, "decays_in_t", vals[1:, -1] < decay_fraction * vals[1:, 0], s[1:])
    rep.passed = all(rep.clauses.values())
    return rep


# ---------------------------------------------------------------------------
# inversion


_BRACKETS: "weakref.WeakKeyDictionary[ScalarGain, dict]" = weakref.WeakKeyDictionary()


def _bracket_table(g: ScalarGain, cap: float):
    """Cached (grid, g(grid)) on [0, cap], or None when g is not increasing there."""
    per = _BRACKETS.setdefault(g, {})
    if cap not in per:
        # log-refined toward zero so small targets start from a narrow bracket
        grid = np.unique(np.concatenate([gain_grid(cap, 2049), np.geomspace(cap * 1e-12, cap * 1e-3, 1000)]))
        vals = np.asarray(g(grid), float)
        ok = bool(np.all(np.isfinite(vals)) and np.all(np.diff(vals) >= 0))
        per[cap] = (grid, vals) if ok else None
    return per[cap]


def invert(g: ScalarGain, y, tol: float = 1e-10, max_iter: int = 200, upper: float | None = None):
    """Solve g(s) = y for s in [0, cap]; vectorized over ``y``.

    A cached table of g gives the starting bracket, which is then narrowed by
    regula falsi with the Illinois modification. Stops when
    |g(s) - y| <= tol * max(|y|, 1e-300) or the bracket around s is narrower
    than tol/2 relative to s, or once g(s) has twice repeated an endpoint value (g flat at float
    resolution on the bracket).
    """
    cap = g.domain_cap if upper is None else upper
    y_arr = np.asarray(y, float)
    scalar = y_arr.ndim == 0
    y_arr = np.atleast_1d(y_arr)
    if np.any(y_arr < 0) or not np.all(np.isfinite(y_arr)):
        raise ValueError("inversion target must be finite and nonnegative")
    top = float(g(cap))
    if np.any(y_arr > top):
        raise SaturationError(
            f"target {float(y_arr.max())!r} exceeds {g.name!r} at its cap ({top!r})", g.name
        )
    table = _bracket_table(g, cap)
    if table is not None:
        grid, vals = table
        i = np.clip(np.searchsorted(vals, y_arr, side="left"), 1, len(grid) - 1)
        lo, hi = grid[i - 1].copy(), grid[i].copy()
        flo, fhi = vals[i - 1] - y_arr, vals[i] - y_arr
    else:
        lo, hi = np.zeros_like(y_arr), np.full_like(y_arr, cap)
        flo, fhi = np.asarray(g(lo), float) - y_arr, top - y_arr
    thresh = tol * np.maximum(np.abs(y_arr), 1e-300)
    out = np.where(np.abs(flo) <= thresh, lo, hi)
    done = (np.abs(flo) <= thresh) | (np.abs(fhi) <= thresh) | (flo >= 0)
    out = np.where(flo >= 0, lo, out)
    glo, ghi = flo.copy(), fhi.copy()  # raw residuals, untouched by the Illinois halving
    flats = np.zeros(y_arr.shape, int)
    side = np.zeros(y_arr.shape, int)  # which end was kept last: -1 lo, +1 hi
    bisect = np.zeros(y_arr.shape, bool)  # forced when two steps did not halve the bracket
    prev = hi - lo
    for _ in range(max_iter):
        if np.all(done):
            break
        act = ~done
        width = hi - lo
        denom = fhi - flo
        x = np.where(denom > 0, hi - fhi * width / np.where(denom > 0, denom, 1.0), 0.5 * (lo + hi))
        x = np.where((x > lo) & (x < hi) & ~bisect, x, 0.5 * (lo + hi))
        fx = np.zeros_like(x)
        fx[act] = np.asarray(g(x[act]), float) - y_arr[act]
        below = fx < 0
        up_lo = act & below
        up_hi = act & ~below
        # Illinois: halve the stale end's residual when the same end is kept twice
        fhi = np.where(up_lo & (side == -1), 0.5 * fhi, fhi)
        flo = np.where(up_hi & (side == 1), 0.5 * flo, flo)
        # g(x) equal to an endpoint value: g is flat at float resolution on the bracket
        flats += act & ((fx == glo) | (fx == ghi))
        lo = np.where(up_lo, x, lo)
        flo = np.where(up_lo, fx, flo)
        glo = np.where(up_lo, fx, glo)
        hi = np.where(up_hi, x, hi)
        fhi = np.where(up_hi, fx, fhi)
        ghi = np.where(up_hi, fx, ghi)
        side = np.where(up_lo, -1, np.where(up_hi, 1, side))
        out = np.where(act, x, out)
        bisect = hi - lo > 0.5 * prev
        prev = width
        # the second exit covers targets below the float resolution of g
        done = done | (flats >= 2) | (np.abs(fx) <= thresh) | (hi - lo <= np.maximum(4 * np.spacing(hi), 0.5 * tol * hi))
    out = np.where(y_arr == 0, 0.0, out)
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# positive-definite factorization


@dataclass(frozen=True, eq=False)
class FactorizationResult:
    rho1: ScalarGain
    rho2: ScalarGain
    grid: np.ndarray
    max_excess: float  # max over the grid of rho1*rho2 - kappa

    def dominated(self, tol: float = 0.0) -> bool:
        return self.max_excess <= tol


def factorize_positive_definite(kappa: ScalarGain, grid_points: int = DEFAULT_GRID) -> FactorizationResult:
    """Split a positive definite kappa as kappa >= rho1*rho2, rho1 in K-inf, rho2 in L.

    With kmin(s) = min of kappa on [s, cap] (nondecreasing, positive for s > 0):
    rho1(s) = min(s, kmin(s) * (1 + s)) and rho2(s) = 1 / (1 + s), so that
    rho1*rho2 <= kmin <= kappa.
    """
    if not verify_kind(kappa, grid_points, kind=PD):
        raise KindError(f"kappa {kappa.name!r} is not positive definite on its range")
    cap = kappa.domain_cap
    grid = gain_grid(cap, grid_points)
    kmin = np.minimum.accumulate(kappa(grid)[::-1])[::-1]
    # on [g_i, g_{i+1}]: km(s) = min(kappa(s), kmin(g_{i+1})); continuous at the
    # nodes, never above kappa, and equal to kappa wherever kappa increases
    r1_top = min(cap, float(kmin[-1]) * (1.0 + cap))
    r1_prev = min(grid[-2], float(kmin[-2]) * (1.0 + grid[-2]))
    slope = max((r1_top - r1_prev) / (grid[-1] - grid[-2]), 1e-12)

    def rho1_fn(s, _k=kappa.fn, _g=grid, _m=kmin, _c=cap, _top=r1_top, _slope=slope):
        s = np.asarray(s, float)
        sc = np.minimum(s, _c)
        nxt = _m[np.clip(np.searchsorted(_g, sc, side="left"), 0, len(_g) - 1)]
        km = np.minimum(np.asarray(_k(sc), float), nxt)
        r1 = np.minimum(s, km * (1.0 + s))
        # round down so that the floating-point product with 1/(1+s) stays <= km
        r2 = 1.0 / (1.0 + s)
        for _ in range(4):
            over = r1 * r2 > km
            if not np.any(over):
                break
            r1 = np.where(over, np.nextafter(r1, 0.0), r1)
        return np.where(s > _c, _top + _slope * (s - _c), r1)

    rho1 = ScalarGain(rho1_fn, KINF, cap, f"min(s, kmin(s)*(1+s)) for kappa={kappa.name}")
    rho2 = ScalarGain(lambda s: 1.0 / (1.0 + np.asarray(s, float)), L, cap, "1/(1+s)")
    excess = float(np.max(rho1(grid) * rho2(grid) - kappa(grid)))
    return FactorizationResult(rho1, rho2, grid, excess)


# ---------------------------------------------------------------------------
# settling times


def _settle(beta: KLFunction, r, eps, t_max: float, s_samples: int, iters: int = 200):
    """Smallest t (to bisection precision) with max_{s<=r} beta(s,t) <= eps."""
    r = np.atleast_1d(np.asarray(r, float))
    eps = np.atleast_1d(np.asarray(eps, float))
    r, eps = np.broadcast_arrays(r, eps)
    frac = np.linspace(0.0, 1.0, s_samples)
    S = r[:, None] * frac[None, :]

    def peak(t):
        return np.max(beta(S, np.broadcast_to(np.asarray(t, float)[:, None], S.shape)), axis=1)

    p0 = peak(np.zeros_like(r))
    at_zero = p0 <= eps
    if np.any(peak(np.full_like(r, t_max))[~at_zero] > eps[~at_zero]):
        bad = np.argmax((peak(np.full_like(r, t_max)) > eps) & ~at_zero)
        raise HorizonError(
            f"beta(r={r[bad]!r}, t_max={t_max!r}) stays above eps={eps[bad]!r}; beta decays too slowly"
        )
    lo = np.zeros_like(r)
    hi = np.full_like(r, t_max)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        above = peak(mid) > eps
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
        if np.all(hi - lo <= 1e-13 * np.maximum(1.0, hi)):
            break
    return np.where(at_zero, 0.0, hi), at_zero


@dataclass(frozen=True, eq=False)
class SettlingTimeMap:
    beta: KLFunction
    r_grid: np.ndarray
    eps_grid: np.ndarray
    table: np.ndarray  # table[i, j] = T_{r_i}(eps_j)
    t_max: float
    at_zero: np.ndarray  # cells where T = 0 (onto-ness fails there)
    s_samples: int = 65

    def __call__(self, r, eps):
        out, _ = _settle(self.beta, r, eps, self.t_max, self.s_samples)
        return float(out[0]) if np.ndim(r) == 0 and np.ndim(eps) == 0 else out

    def check_properties(
        self, abs_tol: float = 1e-9, jump_ratio: float = 0.9, levels: int = 10, jump_tol: float = 1e-6
    ) -> dict:
        """Monotonicity in eps and r, and a refinement test for continuity.

        Each neighbouring pair is halved ``levels`` times, always keeping the
        half with the larger change. A jump keeps its gap from the halfway level
        to the last; for a continuous map the kept gap keeps shrinking, kinks
        included. Kept gaps below ``jump_tol`` are under the accuracy of the
        map and never count as jumps.
        """
        T = self.table
        res = {
            "nonincreasing_in_eps": bool(np.all(np.diff(T, axis=1) <= abs_tol)),
            "nondecreasing_in_r": bool(np.all(np.diff(T, axis=0) >= -abs_tol)),
        }
        nr, ne = len(self.r_grid), len(self.eps_grid)
        pairs = [
            # along eps: r fixed, eps in [e_j, e_{j+1}]
            (lambda x, fixed: self(fixed, x), np.repeat(self.r_grid, ne - 1),
             np.tile(self.eps_grid[:-1], nr), np.tile(self.eps_grid[1:], nr), T[:, :-1].ravel(), T[:, 1:].ravel()),
            # along r: eps fixed, r in [r_i, r_{i+1}]
            (lambda x, fixed: self(x, fixed), np.tile(self.eps_grid, nr - 1),
             np.repeat(self.r_grid[:-1], ne), np.repeat(self.r_grid[1:], ne), T[:-1, :].ravel(), T[1:, :].ravel()),
        ]
        ok, worst = True, 0.0
        for f, fixed, a, b, fa, fb in pairs:
            gap = np.abs(fb - fa)
            sel = gap > abs_tol
            if not np.any(sel):
                continue
            fixed, a, b, fa, fb, gap = fixed[sel], a[sel], b[sel], fa[sel], fb[sel], gap[sel]
            halfway = gap
            for level in range(levels):
                m = 0.5 * (a + b)
                fm = f(m, fixed)
                left = np.abs(fm - fa) >= np.abs(fb - fm)
                b, fb = np.where(left, m, b), np.where(left, fm, fb)
                a, fa = np.where(left, a, m), np.where(left, fa, fm)
                if level + 1 == levels // 2:
                    halfway = np.abs(fb - fa)
            kept = np.abs(fb - fa)
            ratio = np.where(kept > jump_tol, kept / np.maximum(halfway, abs_tol), 0.0)
            worst = max(worst, float(ratio.max()))
            ok &= bool(np.all(ratio < jump_ratio))
        res["continuous"] = ok
        res["worst_refined_gap_ratio"] = worst
        res["surjectivity_fails_at"] = int(np.count_nonzero(self.at_zero))
        return res

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["r", "eps", "T"])
        for i, r in enumerate(self.r_grid):
            for j, e in enumerate(self.eps_grid):
                w.writerow([repr(float(r)), repr(float(e)), repr(float(self.table[i, j]))])
        return buf.getvalue()


def settling_time_map(
    beta: KLFunction, r_grid, eps_grid, t_max: float | None = None, s_samples: int = 65
) -> SettlingTimeMap:
    """Tabulate T_r(eps) = smallest t with beta(s, t) <= eps for all s <= r."""
    r_grid = np.asarray(r_grid, float)
    eps_grid = np.asarray(eps_grid, float)
    if np.any(r_grid < 0) or np.any(eps_grid <= 0):
        raise ValueError("need r >= 0 and eps > 0")
    t_max = beta.time_cap if t_max is None else float(t_max)
    R, E = np.meshgrid(r_grid, eps_grid, indexing="ij")
    table, at_zero = _settle(beta, R.ravel(), E.ravel(), t_max, s_samples)
    return SettlingTimeMap(
        beta,
        r_grid,
        eps_grid,
        table.reshape(R.shape),
        t_max,
        at_zero.reshape(R.shape),
        s_samples,
    )
