"""Disk automorphisms and sampled distortion checks.

Moebius maps psi_z(zeta) = (zeta - z)/(1 - conj(z) zeta) recenter the disk at
an interior point; the distortion validator turns the classical growth and
radius inequalities for conformal maps into assertions over sampled
(point, image) pairs, since the maps produced elsewhere in the package are
only available pointwise.
"""

from __future__ import annotations

import cmath
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, GeometryError

# Samples placed on a circle when estimating image geometry.
BOUNDARY_SAMPLES_DEFAULT = 2**8
# Denominator guard: only reachable when |zeta| = |z| = 1.
_DENOM_FLOOR = 1e-14


@dataclass(frozen=True)
class MobiusMap:
    """Disk automorphism sending z_center to the origin."""

    z_center: complex

    def __post_init__(self):
        if abs(self.z_center) >= 1.0:
            raise DomainError(f"center must lie inside the unit disk, got {self.z_center}")


@dataclass(frozen=True)
class DistortionReport:
    """Sampled conformal-radius geometry and named bound verdicts."""

    cr: float
    dist: float
    rad: float
    checks: dict

    def __post_init__(self):
        if self.cr <= 0 or self.dist <= 0 or self.rad <= 0:
            raise ValueError("report quantities must be positive")

    @property
    def all_pass(self) -> bool:
        return all(self.checks.values())


def mobius_apply(mapping: MobiusMap, zeta: complex) -> complex:
    """(zeta - z)/(1 - conj(z) zeta); maps the unit circle onto itself."""
    z = mapping.z_center
    denom = 1.0 - z.conjugate() * zeta
    if abs(denom) < _DENOM_FLOOR:
        raise GeometryError(f"map degenerate at zeta = {zeta}")
    return (zeta - z) / denom


def mobius_inverse_apply(mapping: MobiusMap, zeta: complex) -> complex:
    """Algebraic inverse (z + zeta)/(1 + conj(z) zeta)."""
    z = mapping.z_center
    denom = 1.0 + z.conjugate() * zeta
    if abs(denom) < _DENOM_FLOOR:
        raise GeometryError(f"inverse map degenerate at zeta = {zeta}")
    return (z + zeta) / denom


def circle_samples(f, radius: float = 1.0, n: int = BOUNDARY_SAMPLES_DEFAULT):
    """(zeta, f(zeta)) pairs on the circle |zeta| = radius."""
    if not 0.0 < radius <= 1.0:
        raise DomainError(f"radius must lie in (0, 1], got {radius}")
    out = []
    for k in range(n):
        zeta = radius * cmath.exp(2j * cmath.pi * k / n)
        out.append((zeta, f(zeta)))
    return out


def verify_distortion(f_samples, w: complex, cr: float) -> DistortionReport:
    """Check sampled growth and radius bounds for a map with f(0) = w, |f'(0)| = cr.

    Growth: |zeta|/4 <= |f(zeta) - w|/cr on every sample and <= 4|zeta| on
    samples with |zeta| <= 1/2.  Radius: dist <= cr <= min(4 dist, rad), with
    dist and rad estimated from the outermost sample ring, so these are
    assertions about the sampled geometry rather than the exact one.
    """
    if cr <= 0:
        raise DomainError(f"conformal radius must be positive, got {cr}")
    if not f_samples:
        raise DomainError("need at least one sample")
    zeta = np.array([p for p, _ in f_samples], dtype=complex)
    img = np.array([q for _, q in f_samples], dtype=complex)
    moduli = np.abs(zeta)
    scaled = np.abs(img - w) / cr

    lower_ok = bool(np.all(scaled >= moduli / 4.0 - 1e-12))
    inner = moduli <= 0.5
    upper_ok = bool(np.all(scaled[inner] <= 4.0 * moduli[inner] + 1e-12))

    ring = moduli >= 0.99 * moduli.max()
    dist = float(np.abs(img[ring] - w).min())
    rad = float(np.abs(img - w).max())
    checks = {
        "growth_lower": lower_ok,
        "growth_upper": upper_ok,
        "dist_below_cr": dist <= cr + 1e-12,
        "cr_within_4dist": cr <= 4.0 * dist + 1e-12,
        "cr_within_rad": cr <= rad + 1e-12,
    }
    return DistortionReport(cr=cr, dist=dist, rad=rad, checks=checks)
