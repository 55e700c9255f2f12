"""Loop events on the exploration branch and renewal-based probabilities.

A branch closes a counterclockwise loop around its target when theta hits
2pi, and a clockwise loop each time theta returns to 0.  The deep-loop event
asks for a clockwise closure whose loop fits inside the disk of radius
e^{-beta} before any counterclockwise closure; its probability at depth n
factorizes as p_1^n because each closure renews the exploration in a fresh
disk.  Containment is decided on sampled trace points with adaptive
refinement, and trials where the sampling cannot resolve it are surfaced as
undecidable rather than classified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ._kernels import TWO_PI
from .conformal import MobiusMap, mobius_inverse_apply
from .diffusion import DiffusionParams, ThetaPath, _recorded_zero_indices
from .errors import (
    DomainError,
    EstimationError,
    EventUndecidableError,
    RetryExhaustedError,
    UndecidableFractionError,
)
from .loewner import RadialDriver, Trace, build_driver, trace_point

# Extra driver horizon beyond beta: a deep closure needs diffusion time past
# the capacity level beta.
T_MARGIN = 20.0
# Excursion height that makes a zero a macroscopic clockwise closure in the
# event scan.  No canonical value exists; half a turn is scale-free.
H_EXC_EVENT = 0.5 * math.pi
# Containment sampling: adjacent loop samples must come within this fraction
# of the containment radius, and one candidate may spend at most this many
# trace evaluations before it is declared undecidable.
GAP_FRACTION = 0.1
SAMPLE_BUDGET = 4096
# Seam tolerance quoted for outermost loops; met only by deep-anchored
# loops, since the seam chord scales with the loop diameter.
DELTA_GAP = 1e-2
_RETRY_BUDGET = 8


@dataclass(frozen=True)
class LoopEvents:
    """Closure times found on one theta path."""

    ccw_time: float | None
    ccw_anchor: float | None
    cw_closures: tuple[tuple[float, float], ...]  # (anchor_time, close_time)

    def __post_init__(self):
        if self.ccw_time is not None and self.ccw_anchor is not None:
            if not self.ccw_anchor < self.ccw_time:
                raise ValueError("ccw anchor must precede the ccw closure")
        last = -math.inf
        for anchor, close in self.cw_closures:
            if not anchor < close:
                raise ValueError("cw anchor must precede its closure")
            if close <= last:
                raise ValueError("cw closures must be time-ordered")
            last = close


@dataclass(frozen=True)
class EventOutcome:
    """Result of scanning one driver for a deep clockwise loop.

    An occurred event carries two radius measurements taken by different
    routes: loop_max_modulus is geometric, the largest tip modulus sampled
    along the closing loop, while domain_radius is the conformal radius
    e^{-close_time} of the unexplored domain, read off the capacity clock
    alone.  The Koebe quarter theorem ties them together: a loop inside
    e^{-beta} D forces the conformal radius below 4 e^{-beta}.
    """

    occurred: bool
    beta: float
    close_time: float | None = None
    domain_radius: float | None = None
    loop_max_modulus: float | None = None

    def __post_init__(self):
        if self.occurred:
            if self.loop_max_modulus is None or self.close_time is None:
                raise ValueError("an occurred event carries its measurements")
            if self.loop_max_modulus > math.exp(-self.beta) * (1 + 1e-9):
                raise ValueError("occurred event with loop outside e^-beta disk")


@dataclass(frozen=True)
class NestedEventStats:
    """Depth-1 event probability and its renewal power."""

    beta: float
    depth: int
    p1_estimate: float
    p1_stderr: float
    pn_renewal: float
    pn_stderr: float
    n_trials: int
    n_undecidable: int

    def __post_init__(self):
        if self.pn_renewal != 0.0 and not math.isclose(
            self.pn_renewal, self.p1_estimate**self.depth, rel_tol=1e-12
        ):
            raise ValueError("pn_renewal must equal p1^depth")


def _events_from_values(times, values, h_exc):
    zero_idx = _recorded_zero_indices(values, h_exc)
    hits = np.flatnonzero(values == TWO_PI)
    ccw_time = float(times[hits[0]]) if hits.size else None
    ccw_anchor = None
    if hits.size and zero_idx.size:
        before = zero_idx[zero_idx < hits[0]]
        if before.size:
            ccw_anchor = float(times[before[-1]])
    closures = tuple(
        (float(times[zero_idx[j - 1]]), float(times[zero_idx[j]]))
        for j in range(1, zero_idx.size)
    )
    return LoopEvents(ccw_time=ccw_time, ccw_anchor=ccw_anchor, cw_closures=closures)


def detect_loop_events(path: ThetaPath, h_exc: float) -> LoopEvents:
    """Closure times of one path: zeros recorded at excursion height h_exc."""
    if h_exc <= 0.0:
        raise DomainError(f"h_exc must be positive, got {h_exc}")
    return _events_from_values(path.times, path.values, h_exc)


def _tip(driver, k, cache):
    if k not in cache:
        cache[k] = trace_point(driver, k * driver.dt)
    return cache[k]


def _loop_contained(driver, k_anchor, k_close, radius, cache):
    """(contained, max_modulus) for the trace segment between two grid indices.

    Samples coarsely, rejects on the first sample outside the radius, then
    refines until adjacent samples are within GAP_FRACTION * radius of each
    other.  Raises EventUndecidableError when the grid resolution or the
    sample budget cannot meet that, so a caller never mistakes an unresolved
    loop for a contained one.
    """
    gap_tol = GAP_FRACTION * radius
    spent = 0

    def sample(k):
        nonlocal spent
        if k not in cache:
            spent += 1
        return _tip(driver, k, cache)

    ks = []
    r_max = 0.0
    for count in (5, 17):
        grid = np.unique(np.linspace(k_anchor, k_close, count).round().astype(np.int64))
        for k in grid:
            p = sample(int(k))
            r_max = max(r_max, abs(p))
            if r_max > radius:
                return False, r_max
        ks = [int(k) for k in grid]
    while True:
        pts = [cache[k] for k in ks]
        inserts = []
        stalled = False
        for a, b, pa, pb in zip(ks, ks[1:], pts, pts[1:]):
            if abs(pb - pa) <= gap_tol:
                continue
            if b - a < 2:
                stalled = True
                continue
            inserts.append((a + b) // 2)
        if not inserts:
            if stalled:
                raise EventUndecidableError(
                    f"containment unresolved at grid resolution near radius {radius:.3g}"
                )
            return True, r_max
        if spent + len(inserts) > SAMPLE_BUDGET:
            raise EventUndecidableError(
                f"containment sample budget exhausted at radius {radius:.3g}"
            )
        for k in inserts:
            p = sample(k)
            r_max = max(r_max, abs(p))
            if r_max > radius:
                return False, r_max
        ks = sorted(set(ks) | set(inserts))


def detect_event_E(
    driver: RadialDriver,
    beta: float,
    h_exc: float = H_EXC_EVENT,
    t_margin: float = T_MARGIN,
) -> EventOutcome:
    """First clockwise loop inside e^{-beta} D before any ccw closure.

    Scans recorded closures in time order.  A closure whose anchor satisfies
    e^{-anchor}/4 > e^{-beta} cannot qualify (the tip modulus is bounded
    below by a quarter of the conformal radius), so those skip the trace
    sampling entirely.
    """
    if beta < math.log(2.0):
        raise DomainError(f"beta must be >= log 2, got {beta}")
    if driver.horizon < beta + t_margin - 1e-9:
        raise DomainError(
            f"driver horizon {driver.horizon} too short for beta {beta}"
            f" + margin {t_margin}"
        )
    radius = math.exp(-beta)
    events = _events_from_values(driver.times, driver.theta_values, h_exc)
    cache = {}
    # An unresolved candidate only poisons the "not occurred" answer: a later
    # closure that decidably fits still certifies the event (with close_time
    # then an upper estimate of the first qualifying closure).
    unresolved = None
    for anchor, close in events.cw_closures:
        if events.ccw_time is not None and close >= events.ccw_time:
            break
        if anchor < beta - math.log(4.0) - 1e-12:
            continue
        k_anchor = round(anchor / driver.dt)
        k_close = round(close / driver.dt)
        try:
            contained, r_max = _loop_contained(driver, k_anchor, k_close, radius, cache)
        except EventUndecidableError as exc:
            unresolved = exc
            continue
        except Exception as exc:  # trace failures are undecidable, never "no"
            unresolved = EventUndecidableError(f"trace failed on closure at {close}")
            unresolved.__cause__ = exc
            continue
        if contained:
            return EventOutcome(
                occurred=True,
                beta=beta,
                close_time=close,
                domain_radius=math.exp(-close),
                loop_max_modulus=r_max,
            )
    if unresolved is not None:
        raise unresolved
    return EventOutcome(occurred=False, beta=beta)


def collect_event_outcomes(
    params: DiffusionParams,
    beta: float,
    n_trials: int,
    seed: int,
    h_exc: float = H_EXC_EVENT,
    t_margin: float = T_MARGIN,
) -> tuple:
    """Scan n_trials fresh drivers; entry i is trial i's EventOutcome, or
    None when that trial was undecidable."""
    if beta < math.log(2.0):
        raise DomainError(f"beta must be >= log 2, got {beta}")
    if n_trials < 1000:
        raise DomainError(f"need at least 1000 trials, got {n_trials}")
    horizon = beta + t_margin
    outcomes = []
    for i in range(n_trials):
        driver = build_driver(params, horizon, seed, stream_index=i)
        try:
            outcomes.append(detect_event_E(driver, beta, h_exc, t_margin))
        except EventUndecidableError:
            outcomes.append(None)
    return tuple(outcomes)


def stats_from_outcomes(beta: float, outcomes) -> NestedEventStats:
    """Depth-1 stats from a trial scan, excluding undecidables from both
    the numerator and the denominator; more than 5% of them fails the run."""
    n_trials = len(outcomes)
    undecidable = sum(1 for out in outcomes if out is None)
    if undecidable > 0.05 * n_trials:
        raise UndecidableFractionError(
            f"{undecidable}/{n_trials} trials undecidable at beta {beta}"
        )
    decided = n_trials - undecidable
    if decided == 0:
        raise EstimationError("no decidable trials")
    successes = sum(1 for out in outcomes if out is not None and out.occurred)
    p1 = successes / decided
    stderr = math.sqrt(p1 * (1.0 - p1) / decided)
    return NestedEventStats(
        beta=beta,
        depth=1,
        p1_estimate=p1,
        p1_stderr=stderr,
        pn_renewal=p1,
        pn_stderr=stderr,
        n_trials=n_trials,
        n_undecidable=undecidable,
    )


def estimate_event_probability(
    params: DiffusionParams,
    beta: float,
    n_trials: int,
    seed: int,
    h_exc: float = H_EXC_EVENT,
    t_margin: float = T_MARGIN,
) -> NestedEventStats:
    """Fraction of fresh drivers on which the deep-loop event occurs."""
    outcomes = collect_event_outcomes(params, beta, n_trials, seed, h_exc, t_margin)
    return stats_from_outcomes(beta, outcomes)


def nested_event_probability(stats: NestedEventStats, n: int) -> NestedEventStats:
    """Renewal power p_1^n with the delta-method standard error n p^{n-1} se."""
    if stats.depth != 1:
        raise DomainError("nesting starts from depth-1 stats")
    if n < 1:
        raise DomainError(f"depth must be >= 1, got {n}")
    if n == 1:
        return stats
    pn = stats.p1_estimate**n
    return replace(
        stats,
        depth=n,
        pn_renewal=pn,
        pn_stderr=n * stats.p1_estimate ** (n - 1) * stats.p1_stderr,
    )


def direct_nested_probability(
    params: DiffusionParams,
    beta: float,
    n_trials: int,
    seed: int,
    depth: int = 2,
    h_exc: float = H_EXC_EVENT,
    t_margin: float = T_MARGIN,
) -> dict:
    """Brute-force nested event probability: each success restarts fresh.

    The restart is the literal renewal construction, so this estimates the
    same quantity as the p_1^depth identity and serves as its oracle.  Depth
    is capped at 2; the cost grows like p_1^{-depth}.
    """
    if depth not in (1, 2):
        raise DomainError(f"direct nesting supports depth 1 or 2, got {depth}")
    if beta < math.log(2.0):
        raise DomainError(f"beta must be >= log 2, got {beta}")
    if n_trials < 1000:
        raise DomainError(f"need at least 1000 trials, got {n_trials}")
    horizon = beta + t_margin
    successes = 0
    undecidable = 0
    for i in range(n_trials):
        try:
            ok = True
            for j in range(depth):
                driver = build_driver(params, horizon, seed, stream_index=depth * i + j)
                if not detect_event_E(driver, beta, h_exc, t_margin).occurred:
                    ok = False
                    break
            if ok:
                successes += 1
        except EventUndecidableError:
            undecidable += 1
    if undecidable > 0.05 * n_trials:
        raise UndecidableFractionError(
            f"{undecidable}/{n_trials} nested trials undecidable at beta {beta}"
        )
    decided = n_trials - undecidable
    if decided == 0:
        raise EstimationError("no decidable trials")
    p = successes / decided
    return {
        "p_direct": p,
        "stderr": math.sqrt(p * (1.0 - p) / decided),
        "depth": depth,
        "beta": beta,
        "n_trials": n_trials,
        "n_undecidable": undecidable,
    }


def winding_number(points: np.ndarray, target: complex) -> int:
    """Signed turns of a closed polyline around a point off the curve."""
    rel = np.asarray(points, dtype=complex) - target
    if np.min(np.abs(rel)) == 0.0:
        raise DomainError("target lies on the polyline")
    ang = np.angle(rel)
    dif = np.diff(ang)
    dif = (dif + math.pi) % (2.0 * math.pi) - math.pi
    return int(round(float(dif.sum()) / (2.0 * math.pi)))


def sample_outermost_loop(
    params: DiffusionParams,
    target: complex,
    horizon: float,
    seed: int,
    stride: int = 1,
) -> Trace:
    """Loop around target: branch trace between its last zero and the 2pi hit.

    The branch toward target is the branch toward 0 conjugated by the disk
    automorphism sending target to 0, so the driver is simulated once and
    only the trace points are mapped back.  The returned polyline repeats its
    first point at the end, closing the curve with a seam chord from the
    final tip back to the anchor point.

    Truncating at the 2pi hit (instead of following the re-targeted branch
    further) is an approximation with a measurable cost: the pinch that
    closes the loop lands on the loop body at an interior time, not at the
    anchor, so the seam chord is comparable to the loop diameter whenever
    the closing excursion starts at small capacity.  Only loops anchored
    deep (anchor time >= log(1/DELTA_GAP) or so) have seams below
    DELTA_GAP.  The chord does not shrink with dt.
    """
    if abs(target) >= 1.0:
        raise DomainError(f"target must lie strictly inside the disk, got {target}")
    if horizon <= 0.0:
        raise DomainError(f"horizon must be positive, got {horizon}")
    if stride < 1:
        raise DomainError(f"stride must be >= 1, got {stride}")
    mapping = MobiusMap(z_center=complex(target)) if target != 0 else None
    for attempt in range(_RETRY_BUDGET):
        driver = build_driver(params, horizon, seed, stream_index=attempt)
        hits = np.flatnonzero(driver.theta_values == TWO_PI)
        if hits.size == 0:
            continue
        k_hit = int(hits[0])
        zeros = np.flatnonzero(driver.theta_values[:k_hit] == 0.0)
        k_anchor = int(zeros[-1])  # the path starts at 0, so this exists
        ks = np.arange(k_anchor, k_hit, stride, dtype=np.int64)
        if ks[-1] != k_hit:
            ks = np.append(ks, k_hit)
        pts = np.array([trace_point(driver, int(k) * driver.dt) for k in ks])
        if mapping is not None:
            pts = np.array([mobius_inverse_apply(mapping, p) for p in pts])
        times = ks * driver.dt
        return Trace(
            times=np.append(times, times[-1] + driver.dt),
            points=np.append(pts, pts[0]),
        )
    raise RetryExhaustedError(
        f"no ccw closure within horizon {horizon} in {_RETRY_BUDGET} attempts"
    )
