"""Tests for the radial Loewner driver, flow, and trace."""

import math

import numpy as np
import pytest
import scipy.stats

from clegasket import conformal, loewner
from clegasket.diffusion import C_CAP_COEFF, DiffusionParams, simulate_theta
from clegasket.errors import DomainError, TraceError
from clegasket.loewner import (
    EPS_TIP,
    RadialDriver,
    Trace,
    build_driver,
    derivative_at_origin,
    flow_point,
    trace_curve,
    trace_point,
)


@pytest.fixture(scope="module")
def driver():
    return build_driver(DiffusionParams(kappa=6.0, dt=1e-3), 3.0, seed=11)


def constant_driver(n=1000, dt=1e-4):
    # W identically 1; exercises the flow against a known slit geometry.
    return RadialDriver(
        times=np.arange(n + 1) * dt,
        w_values=np.ones(n + 1, dtype=complex),
        theta_values=np.zeros(n + 1),
        brownian_increments=np.zeros(n),
        kappa=6.0,
        rho=0.0,
        arg_lift=np.zeros(n + 1),
    )


def test_build_driver_zero_horizon():
    w0 = complex(np.exp(0.7j))
    d = build_driver(DiffusionParams(kappa=6.0, dt=1e-3), 0.0, seed=3, w0=w0)
    assert d.times.shape == (1,)
    assert d.w_values[0] == w0
    assert d.brownian_increments.size == 0
    assert d.horizon == 0.0


def test_build_driver_validation():
    p = DiffusionParams(kappa=6.0, dt=1e-3)
    with pytest.raises(DomainError):
        build_driver(p, 1.0, seed=0, w0=0.5 + 0.5j)
    with pytest.raises(DomainError):
        build_driver(p, 1.0, seed=0, theta0=7.0)
    with pytest.raises(DomainError):
        build_driver(p, -1.0, seed=0)


def test_driver_unit_modulus_and_grid(driver):
    assert np.max(np.abs(np.abs(driver.w_values) - 1.0)) < 1e-12
    assert np.allclose(np.diff(driver.times), driver.dt, rtol=0, atol=1e-15)
    assert driver.theta_values.shape == driver.times.shape


def test_driver_theta_marginal_matches_diffusion(driver):
    path = simulate_theta(DiffusionParams(kappa=6.0, dt=1e-3), 0.0, 3.0, seed=11)
    assert np.array_equal(path.values, driver.theta_values)


def test_driver_determinism(driver):
    again = build_driver(DiffusionParams(kappa=6.0, dt=1e-3), 3.0, seed=11)
    assert np.array_equal(again.w_values, driver.w_values)
    assert np.array_equal(again.brownian_increments, driver.brownian_increments)


def test_driver_argument_reconstruction(driver):
    # The public fields satisfy the grid form of the driving SDE: the lifted
    # argument is sqrt(kappa) B plus (rho/2) times the trapezoid integral of
    # the capped cot(theta/2).
    d = driver
    half = 0.5 * (d.rho + 2.0)
    cap = C_CAP_COEFF * math.sqrt(d.kappa / d.dt) / half
    cot = np.clip(-np.tan(0.5 * (d.theta_values - math.pi)), -cap, cap)
    quad = np.concatenate([[0.0], np.cumsum(0.5 * d.dt * (cot[:-1] + cot[1:]))])
    brownian = np.concatenate([[0.0], np.cumsum(d.brownian_increments)])
    arg = np.angle(d.w_values[0]) + math.sqrt(d.kappa) * brownian + 0.5 * d.rho * quad
    assert np.max(np.abs(np.exp(1j * arg) - d.w_values)) < 1e-9


def test_driver_force_points(driver):
    o = driver.force_points
    assert np.max(np.abs(np.abs(o) - 1.0)) < 1e-12
    assert np.max(np.abs(driver.w_values * np.conj(o) - np.exp(1j * driver.theta_values))) < 1e-12


def test_rho_zero_driver_is_scaled_brownian():
    p = DiffusionParams(kappa=6.0, rho=0.0, dt=5e-4)
    d = build_driver(p, 5.0, seed=21)
    brownian = np.concatenate([[0.0], np.cumsum(d.brownian_increments)])
    assert np.allclose(d.arg_lift, math.sqrt(6.0) * brownian, rtol=0, atol=1e-12)
    inc = np.diff(d.arg_lift)
    assert inc.size == 10000
    var = np.var(inc)
    se = 6.0 * 5e-4 * math.sqrt(2.0 / inc.size)
    assert abs(var - 6.0 * 5e-4) < 4.0 * se
    assert scipy.stats.normaltest(inc).pvalue > 1e-4


def test_flow_point_identity_and_origin(driver):
    r = flow_point(driver, 0.3 + 0.2j, 0.0)
    assert r.alive and r.value == 0.3 + 0.2j
    for t in (0.0, 1.0, 3.0):
        r = flow_point(driver, 0j, t)
        assert r.alive and r.value == 0j


def test_flow_point_domain_errors(driver):
    with pytest.raises(DomainError):
        flow_point(driver, 1.0 + 0j, 1.0)
    with pytest.raises(DomainError):
        flow_point(driver, 0.3j, driver.horizon + 0.5)
    with pytest.raises(DomainError):
        flow_point(driver, 0.3j, -0.1)


def test_flow_constant_driver_matches_fine_oracle():
    d = constant_driver()
    r = flow_point(d, -0.5 + 0j, 0.1)
    assert r.alive
    assert abs(r.value.imag) < 1e-12
    assert r.value.real < -0.5
    g = complex(-0.5)
    h = 1e-6
    for _ in range(100000):
        k1 = -g * (g + 1) / (g - 1)
        g2 = g + 0.5 * h * k1
        k2 = -g2 * (g2 + 1) / (g2 - 1)
        g3 = g + 0.5 * h * k2
        k3 = -g3 * (g3 + 1) / (g3 - 1)
        g4 = g + h * k3
        k4 = -g4 * (g4 + 1) / (g4 - 1)
        g += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    assert r.value == pytest.approx(g, abs=1e-10)


def test_flow_swallow_time_consistent(driver):
    # A point eaten by time 1 reports the same swallow time when the flow is
    # asked to run longer.
    eaten = None
    for off in np.linspace(-0.05, 0.05, 21):
        z = 0.995 * np.exp(1j * (np.angle(driver.w_values[0]) + off))
        r = flow_point(driver, z, 1.0)
        if not r.alive:
            eaten = z
            first = r
            break
    assert eaten is not None, "no nearby point swallowed; driver unexpectedly tame"
    later = flow_point(driver, eaten, 2.0)
    assert not later.alive
    assert later.swallow_time == first.swallow_time
    assert first.swallow_time <= 1.0 + 1e-12


def test_flow_alive_points_stay_distinct(driver):
    rng = np.random.default_rng(5)
    zs = 0.6 * np.sqrt(rng.random(20)) * np.exp(2j * np.pi * rng.random(20))
    vals = [r.value for z in zs if (r := flow_point(driver, complex(z), 1.0)).alive]
    assert len(vals) >= 2
    vals = np.asarray(vals)
    diff = np.abs(vals[:, None] - vals[None, :]) + np.eye(len(vals))
    assert diff.min() > 1e-9


def test_derivative_at_origin_exponential(driver):
    assert derivative_at_origin(driver, 0.0) == 1.0
    assert derivative_at_origin(driver, 1.0) == pytest.approx(math.e, rel=1e-3)
    assert derivative_at_origin(driver, 3.0) == pytest.approx(math.e**3, rel=1e-2)


def test_derivative_matches_finite_difference(driver):
    # Second route: difference quotient of the flow at two small moduli.
    eps = 1e-6
    r1 = flow_point(driver, eps + 0j, 2.0)
    r2 = flow_point(driver, -eps + 0j, 2.0)
    assert r1.alive and r2.alive
    fd = abs(r1.value - r2.value) / (2 * eps)
    assert derivative_at_origin(driver, 2.0) == pytest.approx(fd, rel=1e-6)


def test_trace_point_start_and_grid(driver):
    y = trace_point(driver, 0.0)
    assert abs(y - driver.w_values[0]) <= EPS_TIP * (1 + 1e-9)
    with pytest.raises(DomainError):
        trace_point(driver, 1.5e-3 / 2)
    with pytest.raises(DomainError):
        trace_point(driver, driver.horizon + driver.dt)


def test_trace_constant_driver_is_real_slit():
    d = constant_driver()
    tips = [trace_point(d, t) for t in (0.02, 0.05, 0.1)]
    for y in tips:
        assert abs(np.angle(y)) < 1e-6
        assert 0.0 < y.real < 1.0
    # The slit grows monotonically inward from W = 1.
    assert tips[0].real > tips[1].real > tips[2].real


def test_trace_round_trip(driver):
    for t in (0.5, 1.0, 2.0, 3.0):
        y = trace_point(driver, t)
        r = flow_point(driver, y * (1 - 10 * EPS_TIP), t)
        k = round(t / driver.dt)
        assert r.alive, f"tip preimage swallowed at t={t}"
        assert abs(r.value - driver.w_values[k]) < 1e-2


def test_trace_curve_two_points(driver):
    n = driver.times.size - 1
    tc = trace_curve(driver, n)
    assert tc.times.shape == (2,)
    assert tc.times[0] == 0.0 and tc.times[1] == pytest.approx(driver.horizon)


def test_trace_curve_stride_refinement(driver):
    coarse = trace_curve(driver, 40)
    fine = trace_curve(driver, 20)
    assert np.array_equal(coarse.times, fine.times[::2])
    assert np.array_equal(coarse.points, fine.points[::2])


def test_trace_curve_stays_in_disk():
    d = build_driver(DiffusionParams(kappa=6.0, dt=1e-3), 2.0, seed=8)
    tc = trace_curve(d, 10)
    assert np.all(np.isfinite(tc.points))
    assert np.max(np.abs(tc.points)) <= 1.0 + 1e-6
    assert np.sum(np.abs(np.diff(tc.points))) > 0.0


def test_trace_curve_stride_validation(driver):
    with pytest.raises(DomainError):
        trace_curve(driver, 0)


def test_trace_dataclass_rejects_outside_disk():
    with pytest.raises(ValueError):
        Trace(times=np.array([0.0, 1.0]), points=np.array([0j, 1.5 + 0j]))


def test_single_entry_driver_operations():
    d = build_driver(DiffusionParams(kappa=6.0, dt=1e-3), 0.0, seed=3)
    r = flow_point(d, 0.2 - 0.1j, 0.0)
    assert r.alive and r.value == 0.2 - 0.1j
    tc = trace_curve(d, 5)
    assert tc.points.shape == (1,)
    with pytest.raises(DomainError):
        trace_point(d, 1.0)


def test_inverse_map_satisfies_koebe_bounds(driver):
    # h_t is univalent on the disk with h_t(0) = 0 and conformal radius
    # e^{-t}, so sampled circles must clear every distortion check.
    for t in (1.0, 2.0):
        def inverse(zeta, t=t):
            return loewner.inverse_map_point(driver, zeta, t)

        samples = conformal.circle_samples(inverse, radius=0.98, n=64)
        samples += conformal.circle_samples(inverse, radius=0.5, n=32)
        samples += conformal.circle_samples(inverse, radius=0.25, n=32)
        report = conformal.verify_distortion(samples, 0j, math.exp(-t))
        assert report.all_pass, (t, report.checks)


def test_inverse_map_identity_cases(driver):
    assert loewner.inverse_map_point(driver, 0.3 + 0.1j, 0.0) == 0.3 + 0.1j
    assert loewner.inverse_map_point(driver, 0j, 2.0) == 0j
    with pytest.raises(DomainError):
        loewner.inverse_map_point(driver, 1.0 + 0j, 1.0)
    with pytest.raises(DomainError):
        loewner.inverse_map_point(driver, 0.5 + 0j, driver.horizon + driver.dt)


def test_inverse_map_extends_trace_point(driver):
    # trace_point is this map evaluated just inside the tip preimage.
    for t in (1.0, 3.0):
        k = round(t / driver.dt)
        zeta = (1.0 - EPS_TIP) * np.exp(1j * driver.arg_lift[k])
        assert loewner.inverse_map_point(driver, zeta, t) == trace_point(driver, t)
