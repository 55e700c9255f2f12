"""Box-counting dimension estimation and the survival-exponent bridge.

Counts come from a fixed axis-aligned grid anchored at the origin: a mask
cell contributes its integer index point, a point set its coordinates, and
N(eps) is the number of occupied boxes at side eps.  The dimension is the
least-squares slope of log N against log(1/eps) over a scale window that by
default discards the two largest and two smallest scales, where lattice
cutoff and domain size distort the scaling.  The expectation dimension of
the continuum gasket enters through 2 - alpha.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import DomainError, FitError
from .lattice import GasketMask

# Scales dropped from each end of the ladder when no window is given.
EDGE_TRIM = 2
# Grid shifts per axis for the offset-averaged variant.
OFFSET_SAMPLES = 4
_SLOPE_SLACK = 1e-6


@dataclass(frozen=True)
class BoxCountSeries:
    """Covering counts N(eps) along a decreasing ladder of box sides."""

    scales: np.ndarray
    counts: np.ndarray

    def __post_init__(self) -> None:
        if self.scales.ndim != 1 or self.scales.size != self.counts.size:
            raise DomainError("scales and counts must be 1-D and equal length")
        if self.scales.size == 0:
            raise DomainError("series must contain at least one scale")
        if not (self.scales > 0.0).all():
            raise DomainError("scales must be positive")
        if not (np.diff(self.scales) < 0.0).all():
            raise DomainError("scales must be strictly decreasing")
        if not (self.counts > 0).all():
            raise DomainError("counts must be positive")
        if (np.diff(self.counts) < 0).any():
            raise DomainError("counts must not decrease as the scale shrinks")


@dataclass(frozen=True)
class DimensionFit:
    """Log-log slope with its 95% band over the scales actually used."""

    dimension: float
    ci95: tuple[float, float]
    r2: float
    scale_window: tuple[float, float]

    def __post_init__(self) -> None:
        if not -_SLOPE_SLACK <= self.dimension <= 2.0 + _SLOPE_SLACK:
            raise DomainError(f"dimension {self.dimension} outside the planar range")
        if not self.ci95[0] <= self.dimension <= self.ci95[1]:
            raise DomainError("ci95 must bracket the dimension")


def _occupied_points(data: GasketMask | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, GasketMask):
        ii, jj = np.nonzero(data.mask)
        if ii.size == 0:
            raise DomainError("cannot box-count an empty mask")
        return ii.astype(float), jj.astype(float)
    points = np.asarray(data)
    if points.size == 0:
        raise DomainError("cannot box-count an empty point set")
    if not np.isfinite(points).all():
        raise DomainError("point set contains non-finite entries")
    return points.real.astype(float).ravel(), points.imag.astype(float).ravel()


def _grid_count(xs: np.ndarray, ys: np.ndarray, eps: float) -> int:
    bx = np.floor(xs / eps).astype(np.int64)
    by = np.floor(ys / eps).astype(np.int64)
    span = by.max() - by.min() + 1
    return int(np.unique(bx * span + by).size)


def box_counts(
    data: GasketMask | np.ndarray,
    scales,
    offset_average: bool = False,
) -> BoxCountSeries:
    """Occupied-box counts of a mask or complex point set at each scale.

    The grid is fixed at the origin for reproducibility.  With
    offset_average the count at each scale is the mean over OFFSET_SAMPLES
    diagonal grid shifts, rounded to the nearest box.
    """
    xs, ys = _occupied_points(data)
    eps_values = np.asarray(scales, dtype=float)
    counts = np.empty(eps_values.size, dtype=np.int64)
    for k, eps in enumerate(eps_values):
        if eps <= 0.0:
            raise DomainError(f"scales must be positive, got {eps}")
        if offset_average:
            shifts = np.arange(OFFSET_SAMPLES) * (eps / OFFSET_SAMPLES)
            mean = np.mean([_grid_count(xs + s, ys + s, eps) for s in shifts])
            counts[k] = max(1, round(mean))
        else:
            counts[k] = _grid_count(xs, ys, eps)
    return BoxCountSeries(scales=eps_values, counts=counts)


def fit_box_dimension(
    series: BoxCountSeries, window: tuple[float, float] | None = None
) -> DimensionFit:
    """Least-squares dimension over a scale window.

    window = (smallest, largest) scale kept, inclusive; None trims
    EDGE_TRIM scales from each end of the ladder.
    """
    if window is None:
        if series.scales.size <= 2 * EDGE_TRIM:
            raise FitError(
                f"{series.scales.size} scales cannot survive trimming "
                f"{EDGE_TRIM} from each end"
            )
        keep = np.zeros(series.scales.size, dtype=bool)
        keep[EDGE_TRIM:-EDGE_TRIM] = True
    else:
        lo, hi = float(window[0]), float(window[1])
        if not 0.0 < lo <= hi:
            raise DomainError(f"invalid scale window ({lo}, {hi})")
        keep = (series.scales >= lo) & (series.scales <= hi)
    if int(keep.sum()) < 4:
        raise FitError(f"fit window holds {int(keep.sum())} scales, need >= 4")

    eps = series.scales[keep]
    log_inv = np.log(1.0 / eps)
    log_n = np.log(series.counts[keep].astype(float))
    reg = stats.linregress(log_inv, log_n)
    slope = float(reg.slope)
    if not -_SLOPE_SLACK <= slope <= 2.0 + _SLOPE_SLACK:
        raise FitError(f"fitted slope {slope} outside the planar range")
    half = float(stats.t.ppf(0.975, eps.size - 2)) * float(reg.stderr)
    return DimensionFit(
        dimension=slope,
        ci95=(slope - half, slope + half),
        r2=float(reg.rvalue) ** 2,
        scale_window=(float(eps.min()), float(eps.max())),
    )


def expectation_dimension(alpha_hat: float) -> float:
    """Dimension 2 - alpha of the set not surrounded by any loop."""
    if not 0.0 <= alpha_hat <= 2.0:
        raise DomainError(f"alpha must lie in [0, 2], got {alpha_hat}")
    return 2.0 - alpha_hat


def sierpinski_carpet(depth: int) -> GasketMask:
    """Analytic triadic carpet of side 3**depth, the fit calibration oracle."""
    if depth < 1:
        raise DomainError(f"depth must be >= 1, got {depth}")
    cell = np.array([[1, 1, 1], [1, 0, 1], [1, 1, 1]], dtype=bool)
    mask = np.ones((1, 1), dtype=bool)
    for _ in range(depth):
        mask = np.kron(mask, cell)
    return GasketMask(mask=mask)


def dyadic_scales(extent: int) -> np.ndarray:
    """Powers of two from the extent down to one cell, decreasing."""
    if extent < 1:
        raise DomainError(f"extent must be >= 1, got {extent}")
    top = int(math.floor(math.log2(extent)))
    return np.asarray([float(2**k) for k in range(top, -1, -1)])


def series_csv_text(series: BoxCountSeries) -> str:
    """CSV with the (scale, count) schema."""
    lines = ["scale,count"]
    lines.extend(
        f"{float(s):.12g},{int(c)}" for s, c in zip(series.scales, series.counts)
    )
    return "\n".join(lines) + "\n"


def fit_json_record(fit: DimensionFit) -> dict:
    """JSON-ready fit record with the documented field names."""
    return {
        "dimension": fit.dimension,
        "ci_low": fit.ci95[0],
        "ci_high": fit.ci95[1],
        "r2": fit.r2,
        "window": [fit.scale_window[0], fit.scale_window[1]],
    }
