"""Command line harness for reproducible experiment runs.

A run is described by one JSON config: a command name, a parameter map, a
seed, and an output directory.  The harness fills in defaults, rejects
unknown keys, executes the command, and drops every artifact into the
output directory: delimited data as CSV, a ``result.json`` with the metric
map and an optional pass flag, figures (PNG through the Agg backend, SVG
for vector art), and last of all a ``manifest.json`` naming each other
output with its sha256 hash.  The manifest is written atomically, so its
presence marks a completed run.

Identical config and seed give byte-identical data files no matter what
``workers`` says; the flag is recorded and never consulted.  Wall time
lives only in the manifest, which is therefore the one file excluded from
the byte-identity guarantee.

Exit codes: 0 success, 2 for config problems, 4 when an event estimate
drowns in undecidable trials, 3 for any other failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")  # headless; must be selected before pyplot loads

import matplotlib.pyplot as plt
import numpy as np
from scipy import stats as _scipy_stats

from . import __version__
from .diffusion import (
    DiffusionParams,
    alpha_exponent,
    conditional_endpoint_stats,
    fit_exponent,
    survival_curve,
)
from .dimension import (
    box_counts,
    dyadic_scales,
    expectation_dimension,
    fit_box_dimension,
    fit_json_record,
    series_csv_text,
)
from .errors import ConfigError, RenderError, UndecidableFractionError
from .exploration import (
    H_EXC_EVENT,
    direct_nested_probability,
    estimate_event_probability,
    nested_event_probability,
    sample_outermost_loop,
    winding_number,
)
from .lattice import (
    MODEL_TRI,
    SELF_DUAL_P,
    GasketMask,
    InterfaceLoop,
    boundary_cluster_gasket,
    cell_centers,
    hex_corners,
    read_config_rle,
    sample_fk_config,
    sample_percolation,
    trace_interface_loops,
    write_config_rle,
    write_mask_pbm,
)
from .loewner import Trace, build_driver, trace_curve

# Environment fallback for the seed, lowest rung of the precedence ladder.
SEED_ENV = "CLE_SEED"

_REQUIRED = object()

# Per-command parameter schemas.  A value of _REQUIRED must be supplied by
# the user; anything else is the default.  Unknown keys are rejected.
_PARAM_SCHEMAS: dict[str, dict[str, object]] = {
    "theta-exponent": {
        "kappa": _REQUIRED,
        "n_paths": 100_000,
        "dt": 1e-3,
        "horizons": [float(t) for t in range(2, 31, 2)],
        "fit_window": [8.0, 30.0],
        "theta0": 0.0,
        "rel_tol": 0.10,
        "abs_tol": 0.02,
        "min_r2": 0.99,
    },
    "theta-lemmas": {
        "kappa": 6.0,
        "n_paths": 100_000,
        "dt": 1e-3,
        "horizons": [1.0, 2.0, 4.0, 8.0],
        "c0": 0.3,
        "p0": None,
        "theta0": 0.0,
    },
    "event-prob": {
        "kappa": 6.0,
        "betas": [2.0, 3.0, 4.0],
        "n_trials": 10_000,
        "dt": 2.5e-4,
        "depth": 2,
        "h_exc": None,
        "t_margin": 20.0,
        "direct_check": False,
        "direct_trials": None,
    },
    "sle-trace": {
        "kappa": 6.0,
        "horizon": 3.0,
        "dt": 1e-3,
        "stride": 10,
        "theta0": 0.0,
    },
    "outermost-loop": {
        "kappa": 6.0,
        "horizon": 40.0,
        "dt": 1e-3,
        "stride": 5,
        "target": [0.0, 0.0],
    },
    "perc-gasket": {
        "n": 256,
        "p": 0.5,
        "seeds": 1,
        "window": None,
        "offset_average": False,
        "target": None,
        "tolerance": 0.05,
    },
    "fk-gasket": {
        "n": 128,
        "q": 2.0,
        "p": None,
        "sweeps": None,
        "seeds": 1,
        "window": None,
        "offset_average": False,
        "target": 1.875,
        "tolerance": 0.06,
    },
    "dim-fit": {
        "config": _REQUIRED,
        "window": None,
        "offset_average": False,
        "target": None,
        "tolerance": 0.05,
    },
    "render": {
        "kind": _REQUIRED,
        "source": None,
        "target": [0.0, 0.0],
    },
}

COMMANDS = tuple(sorted(_PARAM_SCHEMAS))

_RENDER_KINDS = ("circle", "interfaces", "loop", "mask", "trace")

_TOP_KEYS = {"command", "params", "seed", "output_dir", "workers"}

# SVG disk geometry, pixel units.
_SVG_SIZE = 512.0
_DISK_CENTER = 256.0
_DISK_RADIUS = 230.0


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved description of one run."""

    command: str
    params: dict
    seed: int = 0
    output_dir: Path = Path("runs")
    workers: int = 1

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        command = raw.get("command")
        if command not in _PARAM_SCHEMAS:
            raise ConfigError(
                f"command must be one of {', '.join(COMMANDS)}, got {command!r}"
            )
        schema = _PARAM_SCHEMAS[command]
        given = raw.get("params", {})
        if not isinstance(given, dict):
            raise ConfigError("params must be an object")
        unknown = set(given) - set(schema)
        if unknown:
            raise ConfigError(f"unknown params for {command}: {sorted(unknown)}")
        params: dict = {}
        for key, default in schema.items():
            if key in given:
                params[key] = given[key]
            elif default is _REQUIRED:
                raise ConfigError(f"{command} requires param {key!r}")
            else:
                params[key] = default
        seed = raw.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        if not 0 <= seed < 2**64:
            raise ConfigError(f"seed must fit in 64 bits, got {seed}")
        workers = raw.get("workers", 1)
        if isinstance(workers, bool) or not isinstance(workers, int) or workers < 1:
            raise ConfigError(f"workers must be a positive integer, got {workers!r}")
        out = raw.get("output_dir", Path("runs") / command)
        if not isinstance(out, (str, Path)):
            raise ConfigError(f"output_dir must be a path, got {out!r}")
        return cls(
            command=command,
            params=params,
            seed=seed,
            output_dir=Path(out),
            workers=workers,
        )


@dataclass(frozen=True)
class RunManifest:
    """What a completed run produced, written last and atomically."""

    command: str
    config: dict
    version: str
    wall_time_s: float
    outputs: dict
    passed: bool | None


# ---------------------------------------------------------------------------
# parameter coercion


def _number(
    params: dict,
    key: str,
    low: float | None = None,
    high: float | None = None,
) -> float:
    value = params[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"param {key!r} must be a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ConfigError(f"param {key!r} must be finite")
    if low is not None and value < low:
        raise ConfigError(f"param {key!r} must be >= {low}, got {value}")
    if high is not None and value > high:
        raise ConfigError(f"param {key!r} must be <= {high}, got {value}")
    return value


def _integer(params: dict, key: str, low: int | None = None) -> int:
    value = params[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"param {key!r} must be an integer, got {value!r}")
    if low is not None and value < low:
        raise ConfigError(f"param {key!r} must be >= {low}, got {value}")
    return value


def _boolean(params: dict, key: str) -> bool:
    value = params[key]
    if not isinstance(value, bool):
        raise ConfigError(f"param {key!r} must be a boolean, got {value!r}")
    return value


def _string(params: dict, key: str) -> str:
    value = params[key]
    if not isinstance(value, str):
        raise ConfigError(f"param {key!r} must be a string, got {value!r}")
    return value


def _number_list(params: dict, key: str, min_len: int = 1) -> list[float]:
    value = params[key]
    if not isinstance(value, (list, tuple)) or len(value) < min_len:
        raise ConfigError(f"param {key!r} must be a list of >= {min_len} numbers")
    out = []
    for item in value:
        if isinstance(item, bool) or not isinstance(item, (int, float)):
            raise ConfigError(f"param {key!r} must contain only numbers")
        out.append(float(item))
    return out


def _pair(params: dict, key: str) -> tuple[float, float] | None:
    value = params[key]
    if value is None:
        return None
    pair = _number_list(params, key, min_len=2)
    if len(pair) != 2:
        raise ConfigError(f"param {key!r} must be a [low, high] pair")
    return pair[0], pair[1]


def _point(params: dict, key: str) -> complex:
    pair = _pair(params, key)
    if pair is None:
        raise ConfigError(f"param {key!r} must be a [re, im] pair")
    return complex(pair[0], pair[1])


# ---------------------------------------------------------------------------
# serialization helpers


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value)
    if value is None or isinstance(value, str):
        return value
    if isinstance(value, Path):
        return str(value)
    return str(value)


def _json_text(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def _write_text(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


def _format_field(value) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return format(float(value), ".12g")


def _csv_text(header: str, rows) -> str:
    lines = [header]
    for row in rows:
        lines.append(",".join(_format_field(v) for v in row))
    return "\n".join(lines) + "\n"


def _trace_csv_text(trace: Trace) -> str:
    rows = ((t, z.real, z.imag) for t, z in zip(trace.times, trace.points))
    return _csv_text("t,re,im", rows)


def _read_trace_csv(path: Path) -> Trace:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read trace file {path}: {exc}") from exc
    lines = text.strip().splitlines()
    if not lines or lines[0] != "t,re,im":
        raise ConfigError(f"{path} is not a trace file (expected header t,re,im)")
    times = []
    points = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != 3:
            raise ConfigError(f"{path}:{lineno}: expected 3 fields")
        try:
            t, re, im = (float(f) for f in fields)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: non-numeric field") from exc
        times.append(t)
        points.append(complex(re, im))
    try:
        return Trace(times=np.asarray(times), points=np.asarray(points, dtype=complex))
    except Exception as exc:
        raise ConfigError(f"{path} does not hold a valid trace: {exc}") from exc


# ---------------------------------------------------------------------------
# figures


def _save_figure(fig, path: Path) -> Path:
    # Fixed Software tag keeps the PNG bytes independent of the clock.
    fig.savefig(path, dpi=150, metadata={"Software": f"clegasket {__version__}"})
    plt.close(fig)
    return path


def _survival_figure(curve, fit, window, path: Path) -> Path:
    fig = plt.figure(figsize=(6.0, 4.5))
    ax = fig.add_subplot(111)
    ts = np.array([e.horizon for e in curve])
    ps = np.array([e.probability for e in curve])
    ses = np.array([e.stderr for e in curve])
    ax.errorbar(ts, ps, yerr=ses, fmt="o", ms=3.5, capsize=2, label="estimate")
    grid = np.linspace(window[0], window[1], 64)
    ax.plot(
        grid,
        np.exp(fit.intercept - fit.slope * grid),
        lw=1.0,
        label=f"decay rate {fit.slope:.4f}",
    )
    ax.set_yscale("log")
    ax.set_xlabel("horizon")
    ax.set_ylabel("survival probability")
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save_figure(fig, path)


def _lemmas_figure(rows, p0, path: Path) -> Path:
    fig = plt.figure(figsize=(6.0, 4.5))
    ax = fig.add_subplot(111)
    ts = [r["T"] for r in rows]
    ax.errorbar(
        ts,
        [r["p_below_pi"] for r in rows],
        yerr=[r["stderr_below_pi"] for r in rows],
        fmt="o-",
        ms=3.5,
        capsize=2,
        label="below pi",
    )
    ax.errorbar(
        ts,
        [r["p_inside_band"] for r in rows],
        yerr=[r["stderr_inside_band"] for r in rows],
        fmt="s-",
        ms=3.5,
        capsize=2,
        label="inside band",
    )
    ax.axhline(0.5, color="0.4", lw=0.8, ls="--")
    if p0 is not None:
        ax.axhline(p0, color="0.7", lw=0.8, ls=":")
    ax.set_xlabel("horizon")
    ax.set_ylabel("conditional probability")
    ax.set_ylim(0.0, 1.0)
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save_figure(fig, path)


def _events_figure(rows, slope, intercept, path: Path) -> Path:
    fig = plt.figure(figsize=(6.0, 4.5))
    ax = fig.add_subplot(111)
    bs = np.array([r["beta"] for r in rows])
    ps = np.array([r["p1"] for r in rows])
    ax.errorbar(
        bs, ps, yerr=[r["p1_stderr"] for r in rows], fmt="o", ms=4, capsize=2
    )
    if slope is not None:
        grid = np.linspace(bs.min(), bs.max(), 32)
        ax.plot(grid, np.exp(intercept + slope * grid), lw=1.0, label=f"slope {slope:+.3f}")
        ax.legend(frameon=False)
    ax.set_yscale("log")
    ax.set_xlabel("depth beta")
    ax.set_ylabel("event probability")
    fig.tight_layout()
    return _save_figure(fig, path)


def _disk_curve_figure(points, path: Path, target: complex | None = None) -> Path:
    fig = plt.figure(figsize=(5.0, 5.0))
    ax = fig.add_subplot(111)
    rim = np.exp(1j * np.linspace(0.0, 2.0 * np.pi, 361))
    ax.plot(rim.real, rim.imag, color="0.35", lw=1.0)
    ax.plot(points.real, points.imag, lw=0.7)
    if target is not None:
        ax.plot([target.real], [target.imag], "x", ms=6, color="0.1")
    ax.set_aspect("equal")
    ax.set_axis_off()
    fig.tight_layout()
    return _save_figure(fig, path)


def _gasket_figure(mask: GasketMask, title: str, path: Path) -> Path:
    fig = plt.figure(figsize=(5.0, 5.0))
    ax = fig.add_subplot(111)
    ax.imshow(mask.mask, origin="lower", interpolation="nearest", cmap="cividis")
    ax.set_title(title)
    ax.set_axis_off()
    fig.tight_layout()
    return _save_figure(fig, path)


def _boxcount_figure(series, fit, path: Path) -> Path:
    fig = plt.figure(figsize=(6.0, 4.5))
    ax = fig.add_subplot(111)
    ax.loglog(series.scales, series.counts, "o", ms=4)
    lo, hi = fit.scale_window
    sel = (series.scales >= lo) & (series.scales <= hi)
    x = np.log(1.0 / series.scales[sel])
    y = np.log(series.counts[sel])
    anchor = y.mean() - fit.dimension * x.mean()
    ax.loglog(
        series.scales[sel],
        np.exp(anchor + fit.dimension * np.log(1.0 / series.scales[sel])),
        lw=1.0,
        label=f"slope {fit.dimension:.3f}",
    )
    ax.set_xlabel("box side")
    ax.set_ylabel("occupied boxes")
    ax.invert_xaxis()
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save_figure(fig, path)


# ---------------------------------------------------------------------------
# SVG rendering


def _circle_element() -> str:
    return (
        f'<circle cx="{_DISK_CENTER:.1f}" cy="{_DISK_CENTER:.1f}" '
        f'r="{_DISK_RADIUS:.1f}" fill="none" stroke="#202020" stroke-width="2"/>'
    )


def _disk_xy(z: complex) -> tuple[float, float]:
    return (_DISK_CENTER + _DISK_RADIUS * z.real, _DISK_CENTER - _DISK_RADIUS * z.imag)


def _trace_path_element(trace: Trace) -> str:
    pts = trace.points
    if pts.size < 2:
        raise RenderError("trace too short to draw")
    closed = pts.size >= 3 and bool(pts[0] == pts[-1])
    if closed:
        pts = pts[:-1]
    coords = (_disk_xy(complex(z)) for z in pts)
    d = "M " + " L ".join(f"{x:.4f},{y:.4f}" for x, y in coords)
    if closed:
        d += " Z"
    return f'<path d="{d}" fill="none" stroke="#b3261e" stroke-width="1.5"/>'


def _winding_text(winding: int) -> str:
    return (
        '<text x="16.0" y="32.0" font-family="monospace" font-size="16">'
        f"winding {winding:+d}</text>"
    )


def _mask_svg(mask: GasketMask, model: str) -> tuple[str, list[str]]:
    cells = np.argwhere(mask.mask)
    if cells.shape[0] == 0:
        raise RenderError("empty artifact: mask has no cells")
    n = mask.mask.shape[0]
    centers = cell_centers(n, model)
    if model == MODEL_TRI:
        offsets = hex_corners(0j)
    else:
        offsets = 0.5 * np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j])
    margin = float(np.abs(offsets).max()) + 0.25
    x0 = float(centers.real.min()) - margin
    x1 = float(centers.real.max()) + margin
    y1 = float(centers.imag.max()) + margin
    height = y1 - (float(centers.imag.min()) - margin)
    elements = []
    for i, j in cells:
        corners = centers[i, j] + offsets
        points = " ".join(f"{c.real - x0:.4f},{y1 - c.imag:.4f}" for c in corners)
        elements.append(f'<polygon points="{points}" fill="#2f6f4f"/>')
    return f"0 0 {x1 - x0:.4f} {height:.4f}", elements


def _loops_svg(loops: tuple) -> tuple[str, list[str]]:
    if len(loops) == 0:
        raise RenderError("empty artifact: no loops to draw")
    allv = np.concatenate([lp.vertices for lp in loops])
    margin = 0.75
    x0 = float(allv.real.min()) - margin
    x1 = float(allv.real.max()) + margin
    y1 = float(allv.imag.max()) + margin
    height = y1 - (float(allv.imag.min()) - margin)
    elements = []
    for lp in loops:
        vs = lp.vertices[:-1]  # closed polyline repeats its first vertex
        d = "M " + " L ".join(f"{v.real - x0:.4f},{y1 - v.imag:.4f}" for v in vs) + " Z"
        elements.append(
            f'<path d="{d}" fill="none" stroke="#1f6feb" stroke-width="0.08"/>'
        )
    return f"0 0 {x1 - x0:.4f} {height:.4f}", elements


def render_svg(
    artifact,
    path: str | Path,
    winding: int | None = None,
    model: str = MODEL_TRI,
) -> Path:
    """Write a deterministic SVG of a trace, a gasket mask, a batch of
    interface loops, or (artifact ``None``) just the unit circle.

    No timestamps or library banners go into the file, so equal artifacts
    give equal bytes.  A closed trace becomes a closed path element; pass
    ``winding`` to annotate it.  Empty artifacts raise RenderError.
    """
    if artifact is None:
        viewbox = f"0 0 {_SVG_SIZE:.0f} {_SVG_SIZE:.0f}"
        elements = [_circle_element()]
    elif isinstance(artifact, Trace):
        viewbox = f"0 0 {_SVG_SIZE:.0f} {_SVG_SIZE:.0f}"
        elements = [_circle_element(), _trace_path_element(artifact)]
        if winding is not None:
            elements.append(_winding_text(winding))
    elif isinstance(artifact, GasketMask):
        viewbox, elements = _mask_svg(artifact, model)
    elif isinstance(artifact, (tuple, list)) and all(
        isinstance(item, InterfaceLoop) for item in artifact
    ):
        viewbox, elements = _loops_svg(tuple(artifact))
    else:
        raise RenderError(f"cannot render artifact of type {type(artifact).__name__}")
    head = (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{viewbox}">\n'
    )
    text = head + "".join(f"  {el}\n" for el in elements) + "</svg>\n"
    return _write_text(Path(path), text)


# ---------------------------------------------------------------------------
# commands


def _cmd_theta_exponent(config: ExperimentConfig, out_dir: Path):
    params = config.params
    kappa = _number(params, "kappa")
    n_paths = _integer(params, "n_paths", low=1)
    dt = _number(params, "dt")
    horizons = _number_list(params, "horizons", min_len=2)
    window = _pair(params, "fit_window")
    if window is None:
        raise ConfigError("param 'fit_window' must be a [low, high] pair")
    theta0 = _number(params, "theta0")
    rel_tol = _number(params, "rel_tol", low=0.0)
    abs_tol = _number(params, "abs_tol", low=0.0)
    min_r2 = _number(params, "min_r2", low=0.0, high=1.0)

    dparams = DiffusionParams(kappa=kappa, dt=dt)
    curve = survival_curve(dparams, horizons, n_paths, seed=config.seed, theta0=theta0)
    fit = fit_exponent(curve, fit_range=window)
    alpha = alpha_exponent(kappa)
    alpha_hat = fit.slope  # reported as a positive decay rate
    if alpha > 0.0:
        passed = abs(alpha_hat - alpha) <= rel_tol * alpha and fit.r2 >= min_r2
    else:
        passed = abs(alpha_hat) <= abs_tol

    rows = [(e.horizon, e.probability, e.stderr, e.n_paths) for e in curve]
    outputs = [
        _write_text(out_dir / "survival.csv", _csv_text("T,p,stderr,n", rows)),
        _survival_figure(curve, fit, window, out_dir / "survival.png"),
    ]
    metrics = {
        "alpha_formula": alpha,
        "alpha_hat": alpha_hat,
        "ci95": fit.ci95,
        "r2": fit.r2,
        "intercept": fit.intercept,
        "dropped_zeros": fit.dropped_zeros,
        "fit_window": list(window),
        "n_paths": n_paths,
    }
    return metrics, passed, outputs


def _cmd_theta_lemmas(config: ExperimentConfig, out_dir: Path):
    params = config.params
    kappa = _number(params, "kappa")
    n_paths = _integer(params, "n_paths", low=1)
    dt = _number(params, "dt")
    horizons = _number_list(params, "horizons", min_len=1)
    c0 = _number(params, "c0", low=0.0)
    p0 = params["p0"]
    if p0 is not None:
        p0 = _number(params, "p0", low=0.0, high=1.0)
    theta0 = _number(params, "theta0")

    dparams = DiffusionParams(kappa=kappa, dt=dt)
    rows = []
    for T in horizons:
        stats = conditional_endpoint_stats(
            dparams, T, c0, n_paths, seed=config.seed, theta0=theta0
        )
        rows.append({"T": T, **stats})

    half_ok = all(r["p_below_pi"] >= 0.5 - 3.0 * r["stderr_below_pi"] for r in rows)
    if p0 is None:
        passed = half_ok
    else:
        band_ok = all(
            r["p_inside_band"] >= p0 - 3.0 * r["stderr_inside_band"] for r in rows
        )
        passed = half_ok and band_ok

    below = [(r["T"], r["p_below_pi"], r["stderr_below_pi"], r["n_survivors"]) for r in rows]
    band = [
        (r["T"], r["p_inside_band"], r["stderr_inside_band"], r["n_survivors"])
        for r in rows
    ]
    outputs = [
        _write_text(out_dir / "below_pi.csv", _csv_text("T,p,stderr,n", below)),
        _write_text(out_dir / "band.csv", _csv_text("T,p,stderr,n", band)),
        _lemmas_figure(rows, p0, out_dir / "lemmas.png"),
    ]
    metrics = {"rows": rows, "c0": c0, "p0": p0, "half_ok": half_ok}
    return metrics, passed, outputs


def _cmd_event_prob(config: ExperimentConfig, out_dir: Path):
    params = config.params
    kappa = _number(params, "kappa")
    betas = _number_list(params, "betas", min_len=1)
    if sorted(betas) != betas or len(set(betas)) != len(betas):
        raise ConfigError("param 'betas' must be strictly increasing")
    n_trials = _integer(params, "n_trials", low=1)
    dt = _number(params, "dt")
    depth = _integer(params, "depth", low=1)
    h_exc = H_EXC_EVENT if params["h_exc"] is None else _number(params, "h_exc", low=0.0)
    t_margin = _number(params, "t_margin", low=0.0)
    direct_check = _boolean(params, "direct_check")
    direct_trials = (
        n_trials
        if params["direct_trials"] is None
        else _integer(params, "direct_trials", low=1)
    )

    dparams = DiffusionParams(kappa=kappa, dt=dt)
    alpha = alpha_exponent(kappa)
    rows = []
    for beta in betas:
        # One shared seed across betas: the deeper event is a subset of the
        # shallower one on the same trial population.
        stats = estimate_event_probability(
            dparams, beta, n_trials, seed=config.seed, h_exc=h_exc, t_margin=t_margin
        )
        nested = nested_event_probability(stats, depth)
        rows.append(
            {
                "beta": beta,
                "p1": stats.p1_estimate,
                "p1_stderr": stats.p1_stderr,
                "pn_renewal": nested.pn_renewal,
                "pn_stderr": nested.pn_stderr,
                "n_trials": stats.n_trials,
                "n_undecidable": stats.n_undecidable,
            }
        )

    slope = None
    intercept = None
    monotone = None
    slope_ok = None
    if len(rows) >= 2:
        p1s = [r["p1"] for r in rows]
        monotone = all(a > b for a, b in zip(p1s, p1s[1:]))
        if all(p > 0.0 for p in p1s):
            reg = _scipy_stats.linregress(betas, np.log(p1s))
            slope = float(reg.slope)
            intercept = float(reg.intercept)
            slope_ok = -1.5 * alpha <= slope <= 0.0

    direct = None
    direct_ok = None
    if direct_check:
        direct = direct_nested_probability(
            dparams,
            betas[0],
            direct_trials,
            seed=config.seed,
            depth=depth,
            h_exc=h_exc,
            t_margin=t_margin,
        )
        renewal = next(r for r in rows if r["beta"] == betas[0])
        gap = abs(direct["p_direct"] - renewal["pn_renewal"])
        direct_ok = gap <= 3.0 * math.hypot(direct["stderr"], renewal["pn_stderr"])

    if len(rows) >= 2:
        passed = bool(monotone) and bool(slope_ok)
        if direct_check:
            passed = passed and bool(direct_ok)
    else:
        passed = None

    outputs = [_events_figure(rows, slope, intercept, out_dir / "events.png")]
    metrics = {
        "rows": rows,
        "depth": depth,
        "alpha": alpha,
        "slope": slope,
        "slope_window": [-1.5 * alpha, 0.0],
        "monotone": monotone,
        "direct": direct,
        "direct_consistent": direct_ok,
    }
    return metrics, passed, outputs


def _cmd_sle_trace(config: ExperimentConfig, out_dir: Path):
    params = config.params
    kappa = _number(params, "kappa")
    horizon = _number(params, "horizon", low=0.0)
    dt = _number(params, "dt")
    stride = _integer(params, "stride", low=1)
    theta0 = _number(params, "theta0")

    dparams = DiffusionParams(kappa=kappa, dt=dt)
    driver = build_driver(dparams, horizon, seed=config.seed, theta0=theta0)
    trace = trace_curve(driver, stride)
    outputs = [
        _write_text(out_dir / "trace.csv", _trace_csv_text(trace)),
        _disk_curve_figure(trace.points, out_dir / "trace.png"),
    ]
    metrics = {
        "n_points": int(trace.points.size),
        "horizon": horizon,
        "final_modulus": float(abs(trace.points[-1])),
    }
    return metrics, None, outputs


def _cmd_outermost_loop(config: ExperimentConfig, out_dir: Path):
    params = config.params
    kappa = _number(params, "kappa")
    horizon = _number(params, "horizon", low=0.0)
    dt = _number(params, "dt")
    stride = _integer(params, "stride", low=1)
    target = _point(params, "target")

    dparams = DiffusionParams(kappa=kappa, dt=dt)
    loop = sample_outermost_loop(dparams, target, horizon, seed=config.seed, stride=stride)
    wind = winding_number(loop.points, target)
    outputs = [
        _write_text(out_dir / "loop.csv", _trace_csv_text(loop)),
        _disk_curve_figure(loop.points, out_dir / "loop.png", target=target),
        render_svg(loop, out_dir / "loop.svg", winding=wind),
    ]
    metrics = {
        "winding": wind,
        "n_points": int(loop.points.size),
        "closure_time": float(loop.times[-2]),
        "seam_gap": float(abs(loop.points[-2] - loop.points[-1])),
    }
    return metrics, None, outputs


def _read_lattice(source: str):
    try:
        return read_config_rle(source)
    except OSError as exc:
        raise ConfigError(f"cannot read lattice config {source}: {exc}") from exc


def _gasket_window(n: int) -> tuple[float, float]:
    # Keep at least four dyadic scales: big lattices cap the window at n/8
    # and drop sides below 4, small ones keep everything up to n/4.
    if n >= 256:
        return 4.0, n / 8.0
    return 1.0, float(max(8, n // 4))


def _gasket_command(config: ExperimentConfig, out_dir: Path, sampler, extra: dict):
    params = config.params
    n = _integer(params, "n", low=2)
    seeds = _integer(params, "seeds", low=1)
    window = _pair(params, "window")
    if window is None:
        window = _gasket_window(n)
    offset_average = _boolean(params, "offset_average")
    tolerance = _number(params, "tolerance", low=0.0)
    if params["target"] is None:
        target = expectation_dimension(alpha_exponent(6.0))
    else:
        target = _number(params, "target", low=0.0, high=2.0)

    per_seed = []
    dims = []
    first_lattice = None
    first_mask = None
    rep_series = None
    rep_fit = None
    for i in range(seeds):
        lattice_config = sampler(n, config.seed + i)
        mask = boundary_cluster_gasket(lattice_config)
        if first_lattice is None:
            first_lattice = lattice_config
            first_mask = mask
        if mask.mask.all() or not mask.mask.any():
            per_seed.append(
                {"seed": config.seed + i, "dimension": None, "skip_reason": "trivial mask"}
            )
            continue
        series = box_counts(mask, dyadic_scales(n), offset_average=offset_average)
        fit = fit_box_dimension(series, window=window)
        if rep_series is None:
            rep_series = series
            rep_fit = fit
        dims.append(fit.dimension)
        per_seed.append(
            {"seed": config.seed + i, "dimension": fit.dimension, "skip_reason": None}
        )

    outputs = [
        write_mask_pbm(first_mask, out_dir / "mask.pbm"),
        write_config_rle(first_lattice, out_dir / "config.rle"),
        _gasket_figure(
            first_mask, f"gasket cells: {first_mask.cell_count}", out_dir / "gasket.png"
        ),
    ]
    if rep_series is not None:
        outputs.append(_write_text(out_dir / "boxcount.csv", series_csv_text(rep_series)))
        outputs.append(_boxcount_figure(rep_series, rep_fit, out_dir / "boxcount.png"))

    if dims:
        mean_dim = float(np.mean(dims))
        passed = abs(mean_dim - target) <= tolerance
        skip_reason = None
    else:
        mean_dim = None
        passed = None
        skip_reason = "trivial mask"
    metrics = {
        "n": n,
        "seeds": seeds,
        "window": list(window),
        "gasket_fraction": float(first_mask.mask.mean()),
        "per_seed": per_seed,
        "dimension_mean": mean_dim,
        "fit": fit_json_record(rep_fit) if rep_fit is not None else None,
        "skip_reason": skip_reason,
        "target": target,
        "tolerance": tolerance,
        **extra,
    }
    return metrics, passed, outputs


def _cmd_perc_gasket(config: ExperimentConfig, out_dir: Path):
    p = _number(config.params, "p", low=0.0, high=1.0)

    def sampler(n, seed):
        return sample_percolation(n, p, seed)

    return _gasket_command(config, out_dir, sampler, {"p": p})


def _cmd_fk_gasket(config: ExperimentConfig, out_dir: Path):
    params = config.params
    q = _number(params, "q", low=1.0)
    p = params["p"]
    if p is not None:
        p = _number(params, "p", low=0.0, high=1.0)
    sweeps = params["sweeps"]
    if sweeps is not None:
        sweeps = _integer(params, "sweeps", low=1)
    n = _integer(params, "n", low=2)

    def sampler(size, seed):
        return sample_fk_config(size, q=q, p=p, sweeps=sweeps, seed=seed)

    extra = {
        "q": q,
        "p": SELF_DUAL_P if p is None else p,
        "sweeps": 10 * n if sweeps is None else sweeps,
    }
    return _gasket_command(config, out_dir, sampler, extra)


def _cmd_dim_fit(config: ExperimentConfig, out_dir: Path):
    params = config.params
    source = _string(params, "config")
    window = _pair(params, "window")
    offset_average = _boolean(params, "offset_average")
    tolerance = _number(params, "tolerance", low=0.0)
    target = params["target"]
    if target is not None:
        target = _number(params, "target", low=0.0, high=2.0)

    lattice_config = _read_lattice(source)
    mask = boundary_cluster_gasket(lattice_config)
    n = int(mask.mask.shape[0])
    if mask.mask.all() or not mask.mask.any():
        metrics = {
            "source": source,
            "n": n,
            "fit": None,
            "skip_reason": "trivial mask",
            "target": target,
        }
        return metrics, None, []
    if window is None:
        window = _gasket_window(n)
    series = box_counts(mask, dyadic_scales(n), offset_average=offset_average)
    fit = fit_box_dimension(series, window=window)
    passed = None if target is None else abs(fit.dimension - target) <= tolerance
    outputs = [
        _write_text(out_dir / "boxcount.csv", series_csv_text(series)),
        _boxcount_figure(series, fit, out_dir / "boxcount.png"),
    ]
    metrics = {
        "source": source,
        "n": n,
        "window": list(window),
        "fit": fit_json_record(fit),
        "skip_reason": None,
        "target": target,
        "tolerance": tolerance,
    }
    return metrics, passed, outputs


def _cmd_render(config: ExperimentConfig, out_dir: Path):
    params = config.params
    kind = _string(params, "kind")
    if kind not in _RENDER_KINDS:
        raise ConfigError(f"param 'kind' must be one of {', '.join(_RENDER_KINDS)}")
    source = params["source"]
    if kind != "circle":
        if source is None:
            raise ConfigError(f"render kind {kind!r} requires param 'source'")
        source = _string(params, "source")

    svg_path = out_dir / "figure.svg"
    if kind == "circle":
        outputs = [render_svg(None, svg_path)]
        metrics = {"kind": kind}
    elif kind == "mask":
        lattice_config = _read_lattice(source)
        mask = boundary_cluster_gasket(lattice_config)
        outputs = [render_svg(mask, svg_path, model=lattice_config.model)]
        metrics = {"kind": kind, "cells": int(mask.mask.sum())}
    elif kind == "interfaces":
        lattice_config = _read_lattice(source)
        loops = trace_interface_loops(lattice_config)
        outputs = [render_svg(loops, svg_path)]
        metrics = {
            "kind": kind,
            "n_loops": len(loops),
            "n_edges": int(sum(lp.n_edges for lp in loops)),
        }
    elif kind == "trace":
        trace = _read_trace_csv(Path(source))
        outputs = [render_svg(trace, svg_path)]
        metrics = {"kind": kind, "points": int(trace.points.size)}
    else:  # loop
        trace = _read_trace_csv(Path(source))
        if trace.points.size < 3 or trace.points[0] != trace.points[-1]:
            raise RenderError("loop render needs a closed trace")
        target = _point(params, "target")
        wind = winding_number(trace.points, target)
        outputs = [render_svg(trace, svg_path, winding=wind)]
        metrics = {"kind": kind, "points": int(trace.points.size), "winding": wind}
    return metrics, None, outputs


_COMMAND_IMPLS = {
    "theta-exponent": _cmd_theta_exponent,
    "theta-lemmas": _cmd_theta_lemmas,
    "event-prob": _cmd_event_prob,
    "sle-trace": _cmd_sle_trace,
    "outermost-loop": _cmd_outermost_loop,
    "perc-gasket": _cmd_perc_gasket,
    "fk-gasket": _cmd_fk_gasket,
    "dim-fit": _cmd_dim_fit,
    "render": _cmd_render,
}


# ---------------------------------------------------------------------------
# run driver


def _config_dict(config: ExperimentConfig) -> dict:
    return {
        "command": config.command,
        "params": _jsonable(config.params),
        "seed": config.seed,
        "output_dir": str(config.output_dir),
        "workers": config.workers,
    }


def _write_manifest(manifest: RunManifest, path: Path) -> Path:
    payload = {
        "command": manifest.command,
        "config": manifest.config,
        "version": manifest.version,
        "wall_time_s": round(manifest.wall_time_s, 6),
        "outputs": manifest.outputs,
        "pass": manifest.passed,
    }
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(_json_text(payload), encoding="utf-8")
    os.replace(tmp, path)
    return path


def run(config: ExperimentConfig) -> RunManifest:
    """Execute one configured command and write its artifacts.

    ``result.json`` carries the metric map and the pass flag (null for
    data-only commands); ``manifest.json`` arrives last with sha256 hashes
    of everything else.
    """
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    metrics, passed, outputs = _COMMAND_IMPLS[config.command](config, out_dir)
    result = {
        "command": config.command,
        "params": _jsonable(config.params),
        "metrics": _jsonable(metrics),
        "pass": passed,
    }
    outputs = list(outputs)
    outputs.append(_write_text(out_dir / "result.json", _json_text(result)))
    hashes = {
        p.name: hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(outputs, key=lambda p: p.name)
    }
    manifest = RunManifest(
        command=config.command,
        config=_config_dict(config),
        version=__version__,
        wall_time_s=time.perf_counter() - start,
        outputs=hashes,
        passed=passed,
    )
    _write_manifest(manifest, out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# entry point


def _parse_override(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """Merge config file, environment, and flags into one resolved config.

    Precedence, lowest to highest: built-in defaults, CLE_SEED (seed only),
    the config file, --override in the order given, then the dedicated
    --seed / --workers / --out flags.
    """
    raw: dict = {}
    if args.config is not None:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    if args.command is not None:
        raw["command"] = args.command
    if "seed" not in raw and SEED_ENV in os.environ:
        try:
            raw["seed"] = int(os.environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    for item in args.override or []:
        key, value = _parse_override(item)
        if key in ("command", "seed", "output_dir", "workers"):
            raw[key] = value
        else:
            params = raw.setdefault("params", {})
            if not isinstance(params, dict):
                raise ConfigError("params must be an object")
            params[key] = value
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.workers is not None:
        raw["workers"] = args.workers
    if args.out is not None:
        raw["output_dir"] = args.out
    return ExperimentConfig.from_dict(raw)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="clegasket",
        description="Run a configured gasket experiment and write its artifacts.",
    )
    parser.add_argument("command", nargs="?", choices=COMMANDS, help="command to run")
    parser.add_argument("--config", metavar="PATH", help="JSON config file")
    parser.add_argument("--seed", type=int, help="seed, beats config and environment")
    parser.add_argument("--out", metavar="DIR", help="output directory")
    parser.add_argument(
        "--workers", type=int, help="recorded in the manifest, never changes results"
    )
    parser.add_argument(
        "--override",
        action="append",
        metavar="KEY=VALUE",
        help="set a param (or command/seed/output_dir/workers); JSON values",
    )
    args = parser.parse_args(argv)
    try:
        config = build_config(args)
        manifest = run(config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except UndecidableFractionError as exc:
        print(f"quality error: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # noqa: BLE001  numerical and geometry failures
        print(f"error: {exc}", file=sys.stderr)
        return 3
    if manifest.passed is None:
        status = "done"
    else:
        status = "pass" if manifest.passed else "fail"
    print(f"{config.command}: {status} ({Path(config.output_dir) / 'manifest.json'})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
