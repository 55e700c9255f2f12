"""Reflected angular diffusion and its survival exponent.

The process on [0, 2pi] with drift ((rho+2)/2) cot(theta/2) and noise
sqrt(kappa) dB, instantaneously reflecting at both endpoints, drives the
branching radial exploration.  This module simulates it with a capped
Euler-Maruyama scheme, estimates boundary-avoidance ("survival")
probabilities, and fits the decay exponent

    alpha(kappa) = (8 - kappa)(3 kappa - 8) / (32 kappa),

which also controls the gasket dimension 2 - alpha.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.special import iv
from scipy.stats import chi2, ncx2, norm

from . import streams
from ._kernels import (
    ENDPOINT_N_ABS,
    ENDPOINT_S_MAX,
    TWO_PI,
    W_MAX_BRIDGE,
    theta_batch_stats,
    theta_path,
)
from .errors import DomainError, EstimationError, FitError

# Drift magnitude cap is C_CAP / sqrt(dt); see step_theta.
C_CAP_COEFF = 2.0
# A zero of the path only counts after an excursion of at least this height
# (radians) since the previous recorded zero; grid reflection would otherwise
# record a dense cloud of micro-zeros.
H_EXC_DEFAULT = 0.2
# Paths per noise block when running batched Monte Carlo.
_BATCH_ROWS = 256
# Resolutions of the tabulated near-barrier step law.
_BRIDGE_TAB_SIZE = 4097
_ENDPOINT_TAB_SIZE = 481


@functools.lru_cache(maxsize=16)
def _bridge_table(kappa: float, rho: float) -> np.ndarray:
    """Crossing probability of the within-step bridge, tabulated in z**(1/3).

    Near 2pi the distance process is a Bessel diffusion of dimension
    1 + 2(rho+2)/kappa, so the chance that a bridge pinned at distances a, b
    crosses the barrier is 1 - I_nu(z)/I_{-nu}(z) with z = a b/(kappa dt) and
    nu = (2 - dim)/2.  The table is uniform in w = z**(1/3) because the
    probability behaves like 1 - c w near w = 0.  For dim >= 2 the barrier is
    unreachable between grid points and the table is identically zero.
    """
    dim = 1.0 + 2.0 * (rho + 2.0) / kappa
    w = np.linspace(0.0, W_MAX_BRIDGE, _BRIDGE_TAB_SIZE)
    if dim >= 2.0:
        return np.zeros_like(w)
    nu = 0.5 * (2.0 - dim)
    z = w**3
    tab = np.ones_like(w)
    tab[1:] = 1.0 - iv(nu, z[1:]) / iv(-nu, z[1:])
    return tab


@functools.lru_cache(maxsize=16)
def _endpoint_table(kappa: float, rho: float) -> np.ndarray:
    """Standardized near-barrier step endpoints r(s, n), bilinearly sampled.

    In units of sig = sqrt(kappa dt) the barrier distance steps from s to
    r = sqrt(Q(Phi(n))) where Q is the chi-square quantile with
    1 + 2(rho+2)/kappa degrees of freedom and noncentrality s**2: the exact
    transition of the local Bessel law, driven by the step's normal score n.
    The surface is dt-free, so one table serves every step size.
    """
    dim = 1.0 + 2.0 * (rho + 2.0) / kappa
    s = np.linspace(0.0, ENDPOINT_S_MAX, _ENDPOINT_TAB_SIZE)
    n = np.linspace(-ENDPOINT_N_ABS, ENDPOINT_N_ABS, _ENDPOINT_TAB_SIZE)
    u = norm.cdf(n)
    q = np.empty((_ENDPOINT_TAB_SIZE, _ENDPOINT_TAB_SIZE))
    q[0] = chi2.ppf(u, dim)
    q[1:] = ncx2.ppf(u[np.newaxis, :], dim, (s[1:] ** 2)[:, np.newaxis])
    return np.sqrt(q)


@dataclass(frozen=True)
class DiffusionParams:
    """Parameters of the reflected angular diffusion."""

    kappa: float
    rho: float | None = None
    dt: float = 1e-3
    reflection: str = "mirror"

    def __post_init__(self):
        if not 8.0 / 3.0 < self.kappa < 8.0:
            raise DomainError(f"kappa must lie strictly in (8/3, 8), got {self.kappa}")
        if self.rho is None:
            object.__setattr__(self, "rho", self.kappa - 6.0)
        if self.rho <= -2.0:
            raise DomainError(f"rho must be > -2, got {self.rho}")
        if not 0.0 < self.dt <= 1e-2:
            raise DomainError(f"dt must be in (0, 1e-2], got {self.dt}")
        if self.reflection != "mirror":
            raise DomainError(f"unsupported reflection rule {self.reflection!r}")

    @property
    def bessel_dimension(self) -> float:
        return bessel_dimension(self.kappa)


@dataclass(frozen=True)
class ThetaPath:
    """One reflected path on a uniform grid.

    values carry exact boundary touches: a step whose Euler proposal crosses
    0 or 2pi records the boundary value at that grid time while the state
    continues from the mirrored proposal.
    """

    times: np.ndarray
    values: np.ndarray
    first_hit_2pi: float | None
    zeros: np.ndarray

    def __post_init__(self):
        if self.values.min() < 0.0 or self.values.max() > TWO_PI:
            raise ValueError("path leaves [0, 2pi]")


@dataclass(frozen=True)
class SurvivalEstimate:
    horizon: float
    probability: float
    stderr: float
    n_paths: int
    low_n: bool = False


@dataclass(frozen=True)
class ExponentFit:
    slope: float
    intercept: float
    ci95: tuple[float, float]
    r2: float
    dropped_zeros: int = 0


def alpha_exponent(kappa: float) -> float:
    """Survival-decay exponent (8-k)(3k-8)/(32k) on [8/3, 8]."""
    if not 8.0 / 3.0 <= kappa <= 8.0:
        raise DomainError(f"kappa must lie in [8/3, 8], got {kappa}")
    return (8.0 - kappa) * (3.0 * kappa - 8.0) / (32.0 * kappa)


def alpha_exponent_exact(kappa: Fraction) -> Fraction:
    """Exact-rational alpha for rational kappa; agrees with alpha_exponent."""
    kappa = Fraction(kappa)
    if not Fraction(8, 3) <= kappa <= 8:
        raise DomainError(f"kappa must lie in [8/3, 8], got {kappa}")
    return (8 - kappa) * (3 * kappa - 8) / (32 * kappa)


def bessel_dimension(kappa: float) -> float:
    """Dimension 1 + 2(kappa-4)/kappa of the comparison Bessel process."""
    if kappa <= 0:
        raise DomainError(f"kappa must be positive, got {kappa}")
    return 1.0 + 2.0 * (kappa - 4.0) / kappa


def theta_drift(theta: float, rho: float) -> float:
    """Drift ((rho+2)/2) cot(theta/2), antisymmetric about pi.

    Evaluated as -((rho+2)/2) tan((theta-pi)/2) so the antisymmetry is exact
    in floating point.  Raises at the endpoints, where the reflection rule
    applies instead.
    """
    if theta <= 0.0 or theta >= TWO_PI:
        raise DomainError(f"theta must lie strictly in (0, 2pi), got {theta}")
    return -0.5 * (rho + 2.0) * math.tan(0.5 * (theta - math.pi))


def step_theta(theta: float, dt: float, gaussian: float, params: DiffusionParams) -> float:
    """One Euler-Maruyama step with capped drift and mirror reflection."""
    cap = C_CAP_COEFF * math.sqrt(params.kappa / dt)
    drift = -0.5 * (params.rho + 2.0) * math.tan(0.5 * (theta - math.pi))
    drift = min(max(drift, -cap), cap)
    p = theta + drift * dt + math.sqrt(params.kappa * dt) * gaussian
    # mirror fold into [0, 2pi]; single application suffices for dt <= 1e-2
    if p < 0.0:
        p = -p
    if p > TWO_PI:
        p = TWO_PI - (p - TWO_PI)
    return min(max(p, 0.0), TWO_PI)


def _recorded_zero_indices(values: np.ndarray, h_exc: float) -> np.ndarray:
    """Indices of grid zeros separated by excursions of height >= h_exc."""
    cand = np.flatnonzero(values == 0.0)
    if cand.size == 0:
        return cand
    recorded = []
    run_max = float(values[: cand[0] + 1].max())
    for j in range(cand.size):
        idx = cand[j]
        if j > 0:
            run_max = max(run_max, float(values[cand[j - 1] : idx + 1].max()))
        if (j == 0 and idx == 0) or run_max >= h_exc:
            recorded.append(idx)
            run_max = 0.0
    return np.asarray(recorded, dtype=np.int64)


def simulate_theta(
    params: DiffusionParams,
    theta0: float,
    horizon: float,
    seed: int,
    h_exc: float = H_EXC_DEFAULT,
    stream_index: int = 0,
) -> ThetaPath:
    """Simulate one path on the grid {0, dt, ..., ceil(horizon/dt) dt}."""
    if not 0.0 <= theta0 <= TWO_PI:
        raise DomainError(f"theta0 must lie in [0, 2pi], got {theta0}")
    if horizon < 0.0:
        raise DomainError(f"horizon must be >= 0, got {horizon}")
    n_steps = math.ceil(horizon / params.dt) if horizon > 0 else 0
    rng = streams.substream(seed, streams.THETA, stream_index)
    noise = rng.standard_normal(n_steps)
    uniforms = rng.random(n_steps)
    values = np.empty(n_steps + 1)
    hit = theta_path(
        theta0,
        params.dt,
        params.kappa,
        0.5 * (params.rho + 2.0),
        noise,
        uniforms,
        _bridge_table(params.kappa, params.rho),
        _endpoint_table(params.kappa, params.rho),
        values,
    )
    times = np.arange(n_steps + 1) * params.dt
    zero_idx = _recorded_zero_indices(values, h_exc)
    if theta0 == TWO_PI:
        first_hit = 0.0
    elif hit >= 0:
        first_hit = float(hit * params.dt)
    else:
        first_hit = None
    return ThetaPath(
        times=times,
        values=values,
        first_hit_2pi=first_hit,
        zeros=times[zero_idx],
    )


def _batch_hits_and_snaps(
    params: DiffusionParams,
    theta0: float,
    n_steps: int,
    snap_idx: np.ndarray,
    n_paths: int,
    seed: int,
):
    """Run n_paths replicas; return first-hit step indices and snapshot values.

    Each replica draws from its own counter-based stream keyed by
    (seed, THETA, replica), so the result is independent of batching and of
    worker scheduling.
    """
    hits = np.empty(n_paths, dtype=np.int64)
    snaps = np.empty((n_paths, snap_idx.size))
    half = 0.5 * (params.rho + 2.0)
    bridge_tab = _bridge_table(params.kappa, params.rho)
    endpoint_tab = _endpoint_table(params.kappa, params.rho)
    for lo in range(0, n_paths, _BATCH_ROWS):
        hi = min(lo + _BATCH_ROWS, n_paths)
        noise = np.empty((hi - lo, n_steps))
        uniforms = np.empty((hi - lo, n_steps))
        for i in range(lo, hi):
            rng = streams.substream(seed, streams.THETA, i)
            noise[i - lo] = rng.standard_normal(n_steps)
            uniforms[i - lo] = rng.random(n_steps)
        theta_batch_stats(
            theta0,
            params.dt,
            params.kappa,
            half,
            noise,
            uniforms,
            bridge_tab,
            endpoint_tab,
            snap_idx,
            hits[lo:hi],
            snaps[lo:hi],
        )
    return hits, snaps


def survival_curve(
    params: DiffusionParams,
    horizons,
    n_paths: int,
    seed: int,
    theta0: float = 0.0,
) -> list[SurvivalEstimate]:
    """Fraction of paths that avoid 2pi up to each horizon.

    All horizons are evaluated on the same path population, so the estimates
    describe nested events and are non-increasing in T.
    """
    horizons = [float(T) for T in horizons]
    if any(b <= a for a, b in zip(horizons, horizons[1:])):
        raise DomainError("horizons must be strictly increasing")
    if n_paths < 1:
        raise DomainError("n_paths must be positive")
    low_n = n_paths < 1000
    n_grid = [round(T / params.dt) for T in horizons]
    n_steps = max(n_grid) if n_grid else 0
    hits, _ = _batch_hits_and_snaps(
        params, theta0, n_steps, np.empty(0, dtype=np.int64), n_paths, seed
    )
    out = []
    for T, nT in zip(horizons, n_grid):
        surv = int(np.count_nonzero((hits < 0) | (hits > nT)))
        p = surv / n_paths
        out.append(
            SurvivalEstimate(
                horizon=T,
                probability=p,
                stderr=math.sqrt(p * (1.0 - p) / n_paths),
                n_paths=n_paths,
                low_n=low_n,
            )
        )
    return out


def fit_exponent(curve, fit_range) -> ExponentFit:
    """Weighted least squares of log p against T inside fit_range.

    Weights are inverse delta-method variances of log p; the slope is
    reported as a positive decay rate.
    """
    lo, hi = fit_range
    inside = [e for e in curve if lo <= e.horizon <= hi]
    dropped = sum(1 for e in inside if e.probability <= 0.0)
    usable = [e for e in inside if e.probability > 0.0]
    if len(usable) < 4:
        raise FitError(
            f"need >= 4 usable points in fit range, have {len(usable)} "
            f"({dropped} dropped at probability zero)"
        )
    T = np.array([e.horizon for e in usable])
    y = np.log([e.probability for e in usable])
    # var(log p) ~ (1-p)/(p n); degenerate when stderr is 0 (p == 1)
    var = np.array(
        [
            max((e.stderr / e.probability) ** 2, 1e-30)
            for e in usable
        ]
    )
    w = 1.0 / var
    X = np.column_stack([np.ones_like(T), T])
    XtW = X.T * w
    cov_unscaled = np.linalg.inv(XtW @ X)
    beta = cov_unscaled @ (XtW @ y)
    resid = y - X @ beta
    dof = len(usable) - 2
    chi2 = float((w * resid**2).sum())
    cov = cov_unscaled * (chi2 / dof if dof > 0 else 1.0)
    slope = -float(beta[1])
    se = math.sqrt(max(cov[1, 1], 0.0))
    ybar = float(np.average(y, weights=w))
    ss_tot = float((w * (y - ybar) ** 2).sum())
    r2 = 1.0 - chi2 / ss_tot if ss_tot > 0 else 1.0
    return ExponentFit(
        slope=slope,
        intercept=float(beta[0]),
        ci95=(slope - 1.96 * se, slope + 1.96 * se),
        r2=max(0.0, min(1.0, r2)),
        dropped_zeros=dropped,
    )


def conditional_endpoint_stats(
    params: DiffusionParams,
    T: float,
    c0: float,
    n_paths: int,
    seed: int,
    theta0: float = 0.0,
) -> dict:
    """Endpoint statistics among paths surviving to T.

    Returns the surviving fraction with theta_T <= pi and with
    theta_T in [c0, 2pi - c0], each with a binomial stderr.
    """
    if T < 0:
        raise DomainError(f"T must be >= 0, got {T}")
    if not 0.0 < c0 < math.pi:
        raise DomainError(f"c0 must lie in (0, pi), got {c0}")
    nT = round(T / params.dt)
    if nT == 0:
        survivors = n_paths
        end = np.full(n_paths, theta0)
    else:
        hits, snaps = _batch_hits_and_snaps(
            params, theta0, nT, np.array([nT], dtype=np.int64), n_paths, seed
        )
        alive = (hits < 0) | (hits > nT)
        survivors = int(np.count_nonzero(alive))
        end = snaps[alive, 0]
    if survivors == 0:
        raise EstimationError(f"no surviving paths out of {n_paths} at T = {T}")
    p_below = float(np.count_nonzero(end <= math.pi)) / survivors
    p_band = float(np.count_nonzero((end >= c0) & (end <= TWO_PI - c0))) / survivors
    return {
        "p_below_pi": p_below,
        "p_inside_band": p_band,
        "stderr_below_pi": math.sqrt(p_below * (1.0 - p_below) / survivors),
        "stderr_inside_band": math.sqrt(p_band * (1.0 - p_band) / survivors),
        "n_survivors": survivors,
        "n_paths": n_paths,
    }
