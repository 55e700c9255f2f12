"""Radial Loewner engine driven by the reflected angular diffusion.

A driver is the pair (W_t, theta_t) on a uniform grid: theta comes from the
diffusion module, the driving point W_t = exp(i arg W_t) accumulates

    arg W_t = arg W_0 + sqrt(kappa) B_t + (rho/2) int_0^t cot(theta_s/2) ds

with the same Gaussian increments and the same singularity cap as the theta
scheme, so the pair is internally consistent.  The disk maps g_t solve
dg = -g (g + W)/(g - W) dt from g_0 = id; trace points are obtained by
running the field backward from just inside the driving point.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np

from . import streams
from ._kernels import (
    C_ADAPT,
    H_FLOOR_FWD,
    H_FLOOR_REV,
    TWO_PI,
    flow_forward,
    flow_forward_deriv,
    flow_reverse,
    theta_path,
    trace_points,
)
from .diffusion import C_CAP_COEFF, DiffusionParams, _bridge_table, _endpoint_table
from .errors import DomainError, TraceError

# Swallowing threshold |g - W| and the reverse-flow tip offset.
EPS_SWALLOW = 1e-4
EPS_TIP = 1e-6


@dataclass(frozen=True)
class RadialDriver:
    """Driving function of one branch on a uniform time grid.

    arg_lift is the continuous argument of w_values (no wrapping), which the
    integrators interpolate linearly between grid points.
    """

    times: np.ndarray
    w_values: np.ndarray
    theta_values: np.ndarray
    brownian_increments: np.ndarray
    kappa: float
    rho: float
    arg_lift: np.ndarray

    def __post_init__(self):
        if np.max(np.abs(np.abs(self.w_values) - 1.0)) > 1e-12:
            raise ValueError("driving values must stay on the unit circle")
        if self.times.size != self.w_values.size or self.times.size != self.theta_values.size:
            raise ValueError("grid arrays must share a length")

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> float:
        if self.times.size < 2:
            raise ValueError("single-entry driver has no step size")
        return float(self.times[1] - self.times[0])

    @property
    def force_points(self) -> np.ndarray:
        """Force-point trajectory O_t = W_t exp(-i theta_t)."""
        return self.w_values * np.exp(-1j * self.theta_values)


@dataclass(frozen=True)
class FlowResult:
    """Outcome of flowing one point: alive with a value, or swallowed."""

    status: str
    value: complex | None
    swallow_time: float | None

    @property
    def alive(self) -> bool:
        return self.status == "alive"


@dataclass(frozen=True)
class Trace:
    times: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        if self.points.size and np.nanmax(np.abs(self.points)) > 1.0 + 1e-6:
            raise ValueError("trace leaves the closed unit disk")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trace times must increase")


def build_driver(
    params: DiffusionParams,
    horizon: float,
    seed: int,
    w0: complex = 1.0 + 0.0j,
    theta0: float = 0.0,
    stream_index: int = 0,
) -> RadialDriver:
    """Simulate theta and accumulate the driving argument on the same grid.

    Uses the same per-replica stream as simulate_theta, so the theta marginal
    of a driver reproduces the diffusion module path for equal inputs.  The
    cot integrand is capped exactly like the theta drift and integrated by
    the trapezoid rule.
    """
    if abs(abs(w0) - 1.0) > 1e-9:
        raise DomainError(f"w0 must lie on the unit circle, got {w0}")
    if not 0.0 <= theta0 <= TWO_PI:
        raise DomainError(f"theta0 must lie in [0, 2pi], got {theta0}")
    if horizon < 0.0:
        raise DomainError(f"horizon must be >= 0, got {horizon}")
    dt = params.dt
    n_steps = math.ceil(horizon / dt) if horizon > 0 else 0
    rng = streams.substream(seed, streams.THETA, stream_index)
    noise = rng.standard_normal(n_steps)
    uniforms = rng.random(n_steps)
    theta = np.empty(n_steps + 1)
    half = 0.5 * (params.rho + 2.0)
    theta_path(
        theta0,
        dt,
        params.kappa,
        half,
        noise,
        uniforms,
        _bridge_table(params.kappa, params.rho),
        _endpoint_table(params.kappa, params.rho),
        theta,
    )
    b_inc = math.sqrt(dt) * noise
    cap_cot = C_CAP_COEFF * math.sqrt(params.kappa / dt) / half
    cot = np.clip(-np.tan(0.5 * (theta - math.pi)), -cap_cot, cap_cot)
    quad = np.concatenate([[0.0], np.cumsum(0.5 * dt * (cot[:-1] + cot[1:]))])
    brownian = np.concatenate([[0.0], np.cumsum(b_inc)])
    arg_lift = cmath.phase(w0) + math.sqrt(params.kappa) * brownian + 0.5 * params.rho * quad
    w_values = np.exp(1j * arg_lift)
    w_values[0] = w0
    return RadialDriver(
        times=np.arange(n_steps + 1) * dt,
        w_values=w_values,
        theta_values=theta,
        brownian_increments=b_inc,
        kappa=params.kappa,
        rho=params.rho,
        arg_lift=arg_lift,
    )


def _check_time(driver: RadialDriver, t: float) -> None:
    if t < 0.0 or t > driver.horizon + 1e-12:
        raise DomainError(f"t = {t} outside driver horizon {driver.horizon}")


def flow_point(driver: RadialDriver, z: complex, t: float) -> FlowResult:
    """g_t(z) by adaptive integration; swallowed when |g - W| < EPS_SWALLOW."""
    if abs(z) >= 1.0:
        raise DomainError(f"z must lie strictly inside the unit disk, got {z}")
    _check_time(driver, t)
    if t == 0.0 or z == 0:
        return FlowResult(status="alive", value=complex(z), swallow_time=None)
    alive, g, reached = flow_forward(
        driver.arg_lift, driver.dt, complex(z), float(t), EPS_SWALLOW, C_ADAPT, H_FLOOR_FWD
    )
    if alive:
        return FlowResult(status="alive", value=g, swallow_time=None)
    return FlowResult(status="swallowed", value=None, swallow_time=float(reached))


def derivative_at_origin(driver: RadialDriver, t: float) -> float:
    """|g_t'(0)|, integrated jointly with the flow; equals e^t up to scheme error."""
    _check_time(driver, t)
    if t == 0.0:
        return 1.0
    alive, _, dg = flow_forward_deriv(
        driver.arg_lift, driver.dt, 0.0j, float(t), EPS_SWALLOW, C_ADAPT, H_FLOOR_FWD
    )
    if not alive:
        raise TraceError("origin flow reported swallowed; driver data is corrupt")
    return abs(dg)


def _grid_index(driver: RadialDriver, t: float) -> int:
    if driver.times.size < 2:
        if t != 0.0:
            raise DomainError("single-entry driver only defines t = 0")
        return 0
    k = round(t / driver.dt)
    if abs(t - k * driver.dt) > 1e-9 or not 0 <= k < driver.times.size:
        raise DomainError(f"t = {t} is not a grid time of the driver")
    return int(k)


def trace_point(driver: RadialDriver, t: float) -> complex:
    """Tip estimate at time t by reverse flow from (1 - EPS_TIP) W_t."""
    k = _grid_index(driver, t)
    if k == 0:
        return (1.0 - EPS_TIP) * driver.w_values[0]
    y0 = (1.0 - EPS_TIP) * np.exp(1j * driver.arg_lift[k])
    ok, y = flow_reverse(driver.arg_lift, driver.dt, float(t), y0, C_ADAPT, H_FLOOR_REV)
    if not ok or not (np.isfinite(y.real) and np.isfinite(y.imag)):
        raise TraceError(f"reverse flow diverged from t = {t}, last value {y}")
    if abs(y) > 1.0 + 1e-6:
        raise TraceError(f"reverse flow left the disk at t = {t}: |y| = {abs(y)}")
    return complex(y)


def inverse_map_point(driver: RadialDriver, zeta: complex, t: float) -> complex:
    """h_t(zeta) = g_t^{-1}(zeta) by reverse flow from an interior point.

    h_t maps the disk onto the unexplored domain with h_t(0) = 0 and
    |h_t'(0)| = e^{-t}; trace_point is the special case zeta -> W_t.
    """
    if abs(zeta) >= 1.0:
        raise DomainError(f"zeta must lie strictly inside the unit disk, got {zeta}")
    k = _grid_index(driver, t)
    if k == 0 or zeta == 0:
        return complex(zeta)
    ok, y = flow_reverse(
        driver.arg_lift, driver.dt, float(t), complex(zeta), C_ADAPT, H_FLOOR_REV
    )
    if not ok or not (np.isfinite(y.real) and np.isfinite(y.imag)):
        raise TraceError(f"reverse flow diverged from t = {t}, last value {y}")
    if abs(y) > 1.0 + 1e-6:
        raise TraceError(f"reverse flow left the disk at t = {t}: |y| = {abs(y)}")
    return complex(y)


def trace_curve(driver: RadialDriver, stride: int) -> Trace:
    """Trace sampled every stride grid points (always including t = 0)."""
    if stride < 1:
        raise DomainError(f"stride must be >= 1, got {stride}")
    idx = np.arange(0, driver.times.size, stride)
    t_samples = driver.times[idx].astype(float)
    out = np.empty(t_samples.size, dtype=complex)
    if driver.times.size < 2:
        out[:] = (1.0 - EPS_TIP) * driver.w_values[0]
        return Trace(times=t_samples, points=out)
    trace_points(
        driver.arg_lift, driver.dt, t_samples, EPS_TIP, C_ADAPT, H_FLOOR_REV, out
    )
    bad = np.flatnonzero(~np.isfinite(out))
    if bad.size:
        raise TraceError(f"reverse flow failed at times {t_samples[bad][:5]}")
    return Trace(times=t_samples, points=out)
