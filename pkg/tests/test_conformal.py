"""Tests for disk automorphisms and sampled distortion bounds."""

import cmath

import numpy as np
import pytest

from clegasket.conformal import (
    DistortionReport,
    MobiusMap,
    circle_samples,
    mobius_apply,
    mobius_inverse_apply,
    verify_distortion,
)
from clegasket.errors import DomainError


def _random_disk_points(rng, n, rmax=0.999):
    r = rmax * np.sqrt(rng.random(n))
    phi = 2 * np.pi * rng.random(n)
    return r * np.exp(1j * phi)


def test_mobius_identity_and_center():
    ident = MobiusMap(0j)
    for zeta in (0.3 + 0.1j, -0.9j, 0.99):
        assert mobius_apply(ident, zeta) == zeta
    m = MobiusMap(0.4 - 0.2j)
    assert mobius_apply(m, m.z_center) == 0


def test_mobius_derivative_at_center():
    m = MobiusMap(0.5 + 0.3j)
    h = 1e-6
    fd = (mobius_apply(m, m.z_center + h) - mobius_apply(m, m.z_center - h)) / (2 * h)
    assert abs(fd) == pytest.approx(1.0 / (1.0 - abs(m.z_center) ** 2), rel=1e-6)


def test_mobius_unit_circle_preserved():
    m = MobiusMap(-0.35 + 0.6j)
    for phi in np.linspace(0, 2 * np.pi, 64, endpoint=False):
        assert abs(abs(mobius_apply(m, cmath.exp(1j * phi))) - 1.0) < 1e-12


def test_mobius_round_trip():
    rng = np.random.default_rng(4)
    m = MobiusMap(0.62 - 0.11j)
    pts = _random_disk_points(rng, 1000)
    err = max(abs(mobius_apply(m, mobius_inverse_apply(m, z)) - z) for z in pts)
    assert err < 1e-12
    assert mobius_inverse_apply(m, 0j) == m.z_center


def test_mobius_inverse_displacement_bound():
    rng = np.random.default_rng(5)
    for z in (0.0j, 0.5 + 0.2j, -0.85j):
        m = MobiusMap(z)
        for zeta in _random_disk_points(rng, 300):
            assert abs(mobius_inverse_apply(m, zeta) - z) <= 2.0 * abs(zeta) + 1e-12


def test_mobius_center_validation():
    with pytest.raises(DomainError):
        MobiusMap(1.0 + 0j)


def test_distortion_identity_map():
    samples = circle_samples(lambda z: z, radius=1.0)
    samples += circle_samples(lambda z: z, radius=0.5, n=64)
    samples += circle_samples(lambda z: z, radius=0.25, n=64)
    report = verify_distortion(samples, w=0j, cr=1.0)
    assert report.all_pass
    assert report.dist == pytest.approx(1.0)
    assert report.rad == pytest.approx(1.0)


def test_distortion_mobius_inverse():
    rng = np.random.default_rng(6)
    z = 0.55 + 0.25j
    m = MobiusMap(z)
    pts = _random_disk_points(rng, 1000, rmax=0.98)
    samples = [(p, mobius_inverse_apply(m, p)) for p in pts]
    report = verify_distortion(samples, w=z, cr=1.0 - abs(z) ** 2)
    assert report.all_pass


def test_distortion_corrupted_sample_fails_growth():
    samples = circle_samples(lambda z: z, radius=1.0)
    samples += circle_samples(lambda z: z, radius=0.5, n=32)
    zeta = 0.3 + 0j
    samples.append((zeta, 5.0 * abs(zeta) * 1.0 + 0j))
    report = verify_distortion(samples, w=0j, cr=1.0)
    assert not report.checks["growth_upper"]
    assert report.checks["growth_lower"]


def test_distortion_domain_errors():
    samples = circle_samples(lambda z: z)
    with pytest.raises(DomainError):
        verify_distortion(samples, w=0j, cr=0.0)
    with pytest.raises(DomainError):
        verify_distortion([], w=0j, cr=1.0)
    with pytest.raises(DomainError):
        circle_samples(lambda z: z, radius=1.5)
    with pytest.raises(ValueError):
        DistortionReport(cr=1.0, dist=-1.0, rad=1.0, checks={})
