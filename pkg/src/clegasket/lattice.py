"""Discrete gasket samplers and a brute-force loop-tracing oracle.

Critical site percolation lives on a rhombic patch of the triangular
lattice, stored as an n x n boolean grid whose six neighbors sit at offsets
(+-1, 0), (0, +-1), (+1, -1), (-1, +1) and whose surrounding ring is a
virtual monochromatic boundary.  The discrete gasket is the boundary-color
cluster attached to that ring, which coincides with the set of cells not
enclosed by any interface loop; both constructions are implemented so one
can audit the other.  Interfaces are cycles on the hexagonal dual: inside
any triangle of three mutually adjacent cells the number of bichromatic
edges is 0 or 2, so bichromatic dual edges form vertex-disjoint cycles and
tracing them is a walk.

The optional random-cluster sampler (q = 2, wired boundary) reuses the same
container on the square lattice with 4-neighbor adjacency; its colors mark
the sites whose bond cluster reaches the wired ring.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.csgraph import connected_components

from .errors import ConfigError, DomainError, GeometryError
from .streams import FK, LATTICE, substream

MODEL_TRI = "tri6"
MODEL_FK = "fk4"
_STRUCTURES = {
    MODEL_TRI: np.array([[0, 1, 1], [1, 1, 1], [1, 1, 0]], dtype=bool),
    MODEL_FK: np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool),
}
# Random-cluster self-dual point for q = 2.
SELF_DUAL_P = math.sqrt(2.0) / (1.0 + math.sqrt(2.0))
# Loop tracing materializes every dual edge; above this size it is no longer
# an oracle and must be requested explicitly.
TRACE_SIZE_LIMIT = 512
# The even-odd crossing test is quadratic in cells x segments.
ENCLOSURE_SIZE_LIMIT = 64
_RAY_ATTEMPTS = 8
_RAY_TOL = 1e-9
_SQ3 = math.sqrt(3.0)

RLE_MAGIC = b"CLEG"
RLE_VERSION = 1
_MODEL_IDS = {MODEL_TRI: 1, MODEL_FK: 2}
_MODEL_NAMES = {v: k for k, v in _MODEL_IDS.items()}


class _DegenerateRay(Exception):
    """Internal: a loop vertex or crossing fell on the test ray."""


@dataclass(frozen=True)
class LatticeConfig:
    """Colored n x n grid with a virtual monochromatic boundary ring."""

    size: int
    colors: np.ndarray
    boundary_color: bool
    model: str = MODEL_TRI

    def __post_init__(self) -> None:
        if self.size < 1:
            raise DomainError(f"size must be >= 1, got {self.size}")
        if self.model not in _STRUCTURES:
            raise DomainError(f"unknown lattice model {self.model!r}")
        if self.colors.dtype != np.bool_ or self.colors.shape != (self.size, self.size):
            raise DomainError(
                f"colors must be a boolean {self.size} x {self.size} grid, "
                f"got {self.colors.dtype} {self.colors.shape}"
            )


@dataclass(frozen=True)
class GasketMask:
    """Boolean grid marking the cells attached to the boundary ring."""

    mask: np.ndarray

    def __post_init__(self) -> None:
        if (
            self.mask.dtype != np.bool_
            or self.mask.ndim != 2
            or self.mask.shape[0] != self.mask.shape[1]
        ):
            raise DomainError("mask must be a square boolean grid")

    @property
    def cell_count(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class InterfaceLoop:
    """Closed polyline on the hexagonal dual separating the two colors.

    Vertices live in the lattice plane where cell (i, j) is embedded at
    (i + j/2, j sqrt(3)/2); enclosure is decided by even-odd ray crossing.
    """

    vertices: np.ndarray

    def __post_init__(self) -> None:
        if self.vertices.ndim != 1 or self.vertices.size < 7:
            raise DomainError("a dual cycle has at least 6 edges")
        if self.vertices[0] != self.vertices[-1]:
            raise DomainError("loop polyline must be closed")

    @property
    def n_edges(self) -> int:
        return self.vertices.size - 1


def cell_centers(n: int, model: str = MODEL_TRI) -> np.ndarray:
    """Embedded centers of the n x n cells as a complex grid."""
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    if model == MODEL_TRI:
        return (i + 0.5 * j) + 1j * (0.5 * _SQ3 * j)
    if model == MODEL_FK:
        return i + 1j * j
    raise DomainError(f"unknown lattice model {model!r}")


def hex_corners(center: complex) -> np.ndarray:
    """The six dual vertices around a triangular-lattice cell."""
    angles = math.pi / 6.0 + np.arange(6) * (math.pi / 3.0)
    return center + np.exp(1j * angles) / _SQ3


def sample_percolation(n: int, p: float, seed: int) -> LatticeConfig:
    """I.i.d. site colors, black with probability p, white boundary."""
    if n < 2:
        raise DomainError(f"lattice size must be >= 2, got {n}")
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"p must lie in [0, 1], got {p}")
    rng = substream(seed, LATTICE, 0)
    colors = rng.random((n, n)) < p
    return LatticeConfig(size=n, colors=colors, boundary_color=False)


def _padded(config: LatticeConfig) -> np.ndarray:
    out = np.full((config.size + 2, config.size + 2), config.boundary_color)
    out[1:-1, 1:-1] = config.colors
    return out


def boundary_cluster_gasket(config: LatticeConfig) -> GasketMask:
    """Flood fill of boundary-colored cells connected to the ring."""
    region = _padded(config) == config.boundary_color
    labels, _ = ndimage.label(region, structure=_STRUCTURES[config.model])
    return GasketMask(mask=labels[1:-1, 1:-1] == labels[0, 0])


def _dual_edges(padded: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Endpoint dual-vertex ids (two arrays) of all bichromatic edges.

    Dual vertices are the triangles UP(a, b) = {(a,b), (a+1,b), (a,b+1)}
    with id a*M + b and DOWN(a, b) = {(a,b), (a+1,b), (a+1,b-1)} with id
    M^2 + a*M + (b-1), where M = N - 1 on the padded N x N grid.  Edges on
    the rhombus rim join two ring cells and can never be bichromatic, so
    every bichromatic edge has both flanking triangles in range.
    """
    big = padded.shape[0]
    m = big - 1
    down0 = m * m

    bi1 = padded[:-1, :] != padded[1:, :]
    bi2 = padded[:, :-1] != padded[:, 1:]
    bi3 = padded[:-1, 1:] != padded[1:, :-1]
    if bi1[:, 0].any() or bi1[:, -1].any() or bi2[0, :].any() or bi2[-1, :].any():
        raise GeometryError("bichromatic edge on the virtual ring rim")

    ends_a = []
    ends_b = []
    # (i,j)-(i+1,j): flanked by UP(i,j) and DOWN(i,j).
    i1, j1 = np.nonzero(bi1[:, 1:-1])
    j1 = j1 + 1
    ends_a.append(i1 * m + j1)
    ends_b.append(down0 + i1 * m + (j1 - 1))
    # (i,j)-(i,j+1): flanked by UP(i,j) and DOWN(i-1,j+1).
    i2, j2 = np.nonzero(bi2[1:-1, :])
    i2 = i2 + 1
    ends_a.append(i2 * m + j2)
    ends_b.append(down0 + (i2 - 1) * m + j2)
    # (a,b+1)-(a+1,b): flanked by DOWN(a,b+1) and UP(a,b).
    a3, b3 = np.nonzero(bi3)
    ends_a.append(down0 + a3 * m + b3)
    ends_b.append(a3 * m + b3)
    return np.concatenate(ends_a), np.concatenate(ends_b)


def _dual_coordinates(ids: np.ndarray, big: int) -> np.ndarray:
    m = big - 1
    is_down = ids >= m * m
    rid = np.where(is_down, ids - m * m, ids)
    a = rid // m
    b = rid % m + is_down
    x = (a - 1.0) + 0.5 * (b - 1.0) + 0.5
    y = 0.5 * _SQ3 * (b - 1.0) + np.where(is_down, -_SQ3 / 6.0, _SQ3 / 6.0)
    return x + 1j * y


def trace_interface_loops(
    config: LatticeConfig, allow_large: bool = False
) -> tuple[InterfaceLoop, ...]:
    """Walk every bichromatic dual edge into its unique cycle."""
    if config.model != MODEL_TRI:
        raise DomainError("interface tracing is defined on the triangular model")
    if config.size > TRACE_SIZE_LIMIT and not allow_large:
        raise DomainError(
            f"size {config.size} exceeds the oracle guard {TRACE_SIZE_LIMIT}; "
            "pass allow_large=True to force"
        )
    padded = _padded(config)
    end_a, end_b = _dual_edges(padded)
    n_edges = end_a.size
    if n_edges == 0:
        return ()

    incidence: dict[int, list[int]] = {}
    for k in range(n_edges):
        incidence.setdefault(int(end_a[k]), []).append(k)
        incidence.setdefault(int(end_b[k]), []).append(k)
    for vid, edges in incidence.items():
        if len(edges) != 2:
            raise GeometryError(f"dual vertex {vid} has interface degree {len(edges)}")

    visited = np.zeros(n_edges, dtype=bool)
    loops = []
    for e0 in range(n_edges):
        if visited[e0]:
            continue
        start = int(end_a[e0])
        ids = [start]
        vertex = int(end_b[e0])
        edge = e0
        visited[e0] = True
        while vertex != start:
            ids.append(vertex)
            first, second = incidence[vertex]
            edge = second if first == edge else first
            visited[edge] = True
            vertex = int(end_b[edge]) if int(end_a[edge]) == vertex else int(end_a[edge])
        ids.append(start)
        loops.append(
            InterfaceLoop(vertices=_dual_coordinates(np.array(ids), padded.shape[0]))
        )
    return tuple(loops)


def _crossing_parities(
    centers: np.ndarray,
    starts: np.ndarray,
    ends: np.ndarray,
    loop_offsets: np.ndarray,
    phase: complex,
) -> np.ndarray:
    """Per-loop even-odd crossing parity of rays from each center.

    The frame is rotated so the ray is the positive real axis; any vertex
    within _RAY_TOL of the ray, or any crossing within _RAY_TOL of a center,
    aborts with _DegenerateRay.
    """
    n_cells = centers.size
    odd = np.zeros((n_cells, loop_offsets.size - 1), dtype=bool)
    chunk = max(1, int(2**22 // max(starts.size, 1)))
    for lo in range(0, n_cells, chunk):
        c = centers[lo : lo + chunk, None]
        u0 = (starts[None, :] - c) * phase
        u1 = (ends[None, :] - c) * phase
        y0 = u0.imag
        y1 = u1.imag
        if bool(((np.abs(y0) < _RAY_TOL) & (u0.real > -_RAY_TOL)).any()):
            raise _DegenerateRay
        crossing = (y0 > 0.0) != (y1 > 0.0)
        t = np.where(crossing, y0 / np.where(crossing, y0 - y1, 1.0), 0.0)
        x = u0.real + (u1.real - u0.real) * t
        if bool((crossing & (np.abs(x) < _RAY_TOL)).any()):
            raise _DegenerateRay
        hits = crossing & (x > 0.0)
        counts = np.add.reduceat(hits, loop_offsets[:-1], axis=1)
        odd[lo : lo + chunk] = counts % 2 == 1
    return odd


def enclosure_gasket(config: LatticeConfig) -> GasketMask:
    """Cells whose ray crosses every interface loop an even number of times.

    Independent of the flood fill: decides enclosure loop by loop with an
    even-odd ray test, retrying with a rotated ray whenever a loop vertex or
    a crossing is too close to the ray to classify.
    """
    if config.size > ENCLOSURE_SIZE_LIMIT:
        raise DomainError(
            f"size {config.size} exceeds the oracle guard {ENCLOSURE_SIZE_LIMIT}"
        )
    loops = trace_interface_loops(config)
    n = config.size
    if not loops:
        return GasketMask(mask=np.ones((n, n), dtype=bool))
    starts = np.concatenate([lp.vertices[:-1] for lp in loops])
    ends = np.concatenate([lp.vertices[1:] for lp in loops])
    loop_offsets = np.concatenate([[0], np.cumsum([lp.n_edges for lp in loops])])
    centers = cell_centers(n, config.model).ravel()
    for attempt in range(_RAY_ATTEMPTS):
        phase = complex(np.exp(-1j * (0.37 + 0.71 * attempt)))
        try:
            odd = _crossing_parities(centers, starts, ends, loop_offsets, phase)
        except _DegenerateRay:
            continue
        return GasketMask(mask=~odd.any(axis=1).reshape(n, n))
    raise GeometryError(f"no generic ray found in {_RAY_ATTEMPTS} attempts")


def _bond_components(
    spins: np.ndarray, p: float, rng: np.random.Generator
) -> tuple[np.ndarray, int]:
    """Component labels of the open-bond graph plus the wired ghost site.

    Bonds open with probability p between equal spins; every border site has
    one bond per adjacent ring cell toward the ghost, whose spin is fixed up.
    """
    n = spins.shape[0]
    ghost = n * n
    ids = np.arange(n * n).reshape(n, n)

    open_h = (spins[:, :-1] == spins[:, 1:]) & (rng.random((n, n - 1)) < p)
    open_v = (spins[:-1, :] == spins[1:, :]) & (rng.random((n - 1, n)) < p)
    rows = [ids[:, :-1][open_h], ids[:-1, :][open_v]]
    cols = [ids[:, 1:][open_h], ids[1:, :][open_v]]
    for border in (ids[0, :], ids[-1, :], ids[:, 0], ids[:, -1]):
        open_g = (spins.ravel()[border] == 1) & (rng.random(n) < p)
        rows.append(border[open_g])
        cols.append(np.full(int(open_g.sum()), ghost))
    row = np.concatenate(rows)
    col = np.concatenate(cols)
    graph = sparse.coo_matrix(
        (np.ones(row.size, dtype=np.uint8), (row, col)), shape=(ghost + 1, ghost + 1)
    )
    n_comp, labels = connected_components(graph, directed=False)
    return labels, n_comp


def sample_fk_config(
    n: int,
    q: float = 2.0,
    p: float | None = None,
    sweeps: int | None = None,
    seed: int = 0,
) -> LatticeConfig:
    """Wired-boundary random-cluster sample on the square lattice (q = 2).

    Swendsen-Wang alternation between bond and spin resampling, with the
    boundary ring identified to a ghost spin held up.  The returned colors
    mark the sites whose final bond cluster reaches the ring, so the gasket
    extractor applies unchanged.
    """
    if q != 2.0:
        raise DomainError(f"only q = 2 is implemented, got q = {q}")
    if n < 2:
        raise DomainError(f"lattice size must be >= 2, got {n}")
    p = SELF_DUAL_P if p is None else float(p)
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"p must lie in [0, 1], got {p}")
    sweeps = 10 * n if sweeps is None else int(sweeps)
    if sweeps < 10 * n:
        raise DomainError(f"sweeps must be >= 10 n = {10 * n}, got {sweeps}")

    rng = substream(seed, FK, 0)
    ghost = n * n
    spins = np.ones((n, n), dtype=np.int8)
    for _ in range(sweeps):
        labels, n_comp = _bond_components(spins, p, rng)
        values = rng.integers(0, 2, size=n_comp).astype(np.int8)
        values[labels[ghost]] = 1
        spins = values[labels[:ghost]].reshape(n, n)
    labels, _ = _bond_components(spins, p, rng)
    colors = (labels[:ghost] == labels[ghost]).reshape(n, n)
    return LatticeConfig(size=n, colors=colors, boundary_color=True, model=MODEL_FK)


def write_mask_pbm(mask: GasketMask, path: str | Path) -> Path:
    """Binary PBM (P4); gasket cells are the black bits."""
    out = Path(path)
    height, width = mask.mask.shape
    header = f"P4\n{width} {height}\n".encode("ascii")
    packed = np.packbits(mask.mask.astype(np.uint8), axis=1)
    out.write_bytes(header + packed.tobytes())
    return out


def write_config_rle(config: LatticeConfig, path: str | Path) -> Path:
    """Run-length encoding with the 8-byte CLEG header.

    Header: magic, version byte, size as big-endian uint16, model id byte.
    Payload: boundary color byte, then (count: uint32 LE, value: uint8) runs
    over the row-major flattened colors.
    """
    if config.size > 0xFFFF:
        raise DomainError(f"size {config.size} does not fit the header")
    out = Path(path)
    header = (
        RLE_MAGIC
        + bytes([RLE_VERSION])
        + config.size.to_bytes(2, "big")
        + bytes([_MODEL_IDS[config.model]])
    )
    flat = config.colors.ravel()
    breaks = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate([[0], breaks])
    lengths = np.diff(np.concatenate([starts, [flat.size]]))
    chunks = [bytes([config.boundary_color])]
    chunks.extend(
        struct.pack("<IB", int(count), int(flat[start]))
        for start, count in zip(starts, lengths)
    )
    out.write_bytes(header + b"".join(chunks))
    return out


def read_config_rle(path: str | Path) -> LatticeConfig:
    """Inverse of write_config_rle, validating the header and run totals."""
    raw = Path(path).read_bytes()
    if len(raw) < 9 or raw[:4] != RLE_MAGIC:
        raise ConfigError(f"{path}: not a CLEG run-length file")
    if raw[4] != RLE_VERSION:
        raise ConfigError(f"{path}: unsupported version {raw[4]}")
    size = int.from_bytes(raw[5:7], "big")
    model = _MODEL_NAMES.get(raw[7])
    if model is None:
        raise ConfigError(f"{path}: unknown model id {raw[7]}")
    boundary_color = bool(raw[8])
    body = raw[9:]
    if len(body) % 5:
        raise ConfigError(f"{path}: truncated run data")
    flat = np.empty(size * size, dtype=bool)
    pos = 0
    for off in range(0, len(body), 5):
        count, value = struct.unpack_from("<IB", body, off)
        if pos + count > flat.size:
            raise ConfigError(f"{path}: runs exceed the {size} x {size} grid")
        flat[pos : pos + count] = bool(value)
        pos += count
    if pos != flat.size:
        raise ConfigError(f"{path}: runs cover {pos} of {flat.size} cells")
    return LatticeConfig(
        size=size,
        colors=flat.reshape(size, size),
        boundary_color=boundary_color,
        model=model,
    )
