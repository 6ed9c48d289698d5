"""Regularized Hough matching between two hyperimages.

Every source grid cell is scored against every target grid cell by an
appearance term times a geometry term.  The appearance term is the
clamped cosine similarity raised to an integer exponent:

    p(m) = max(0, cos(f, f'))^d

The geometry term is a Hough vote total: each candidate match casts its
appearance score into a 2D histogram over pixel offsets
(x_tgt - x_src, normalized per axis), and a match's confidence is its
appearance score times the accumulated mass of its own offset bin:

    confidence(m) = p(m) * votes[bin(m)]

The kernel runs in two passes over fixed-size chunks of source cells:
pass one computes appearance scores and per-chunk vote histograms,
pass two multiplies scores by the merged vote table.  Chunk boundaries
never depend on the thread count and partial votes are merged in chunk
order, so results are bitwise identical for 1 and N threads.
Similarities are accumulated in float64 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hyperimage import HyperImage
from .parallel import ordered_map, resolve_threads

DEFAULT_EXPONENT = 3
DEFAULT_BINS = 10

# cells per kernel chunk; a constant, never derived from the thread
# count, so that chunk boundaries (and hence float summation order)
# are identical no matter how the work is spread
CHUNK_CELLS = 512


@dataclass(frozen=True)
class RhmConfig:
    """Matching knobs: similarity exponent, vote grid, offset normalizer.

    Offsets are normalized per axis by the target image dimensions, or
    by ``fixed_range`` on both axes when it is set.
    """

    exponent: int = DEFAULT_EXPONENT
    bins_y: int = DEFAULT_BINS
    bins_x: int = DEFAULT_BINS
    fixed_range: float | None = None

    def __post_init__(self):
        if not isinstance(self.exponent, int) or self.exponent < 1:
            raise ValueError(f"exponent must be an integer >= 1, got {self.exponent!r}")
        if self.bins_y < 1 or self.bins_x < 1:
            raise ValueError(f"bins must be >= 1, got {self.bins_y}x{self.bins_x}")
        if self.fixed_range is not None and not (
            np.isfinite(self.fixed_range) and self.fixed_range > 0
        ):
            raise ValueError(f"fixed_range must be positive, got {self.fixed_range!r}")


@dataclass(frozen=True)
class ConfidenceTensor:
    """Dense match confidences, one row per source cell, column per target cell."""

    values: np.ndarray  # (N_src, N_tgt) float64
    src_grid: tuple[int, int]
    tgt_grid: tuple[int, int]

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.dtype != np.float64:
            raise ValueError("values must be a 2D float64 array")
        if v.shape[0] != self.src_grid[0] * self.src_grid[1]:
            raise ValueError(
                f"rows {v.shape[0]} do not match source grid {self.src_grid}"
            )
        if v.shape[1] != self.tgt_grid[0] * self.tgt_grid[1]:
            raise ValueError(
                f"columns {v.shape[1]} do not match target grid {self.tgt_grid}"
            )
        v.flags.writeable = False


@dataclass(frozen=True)
class HoughHistogram:
    """Accumulated appearance mass per offset bin."""

    votes: np.ndarray  # (bins_y, bins_x) float64

    def __post_init__(self):
        self.votes.flags.writeable = False


def appearance_similarity(f: np.ndarray, g: np.ndarray, exponent: int = DEFAULT_EXPONENT) -> float:
    """Clamped cosine similarity raised to ``exponent``, in [0, 1].

    Zero vectors have similarity 0 with everything.
    """
    f = np.asarray(f, dtype=np.float64).ravel()
    g = np.asarray(g, dtype=np.float64).ravel()
    if f.shape != g.shape:
        raise ValueError(f"feature length mismatch: {f.shape[0]} vs {g.shape[0]}")
    nf = np.linalg.norm(f)
    ng = np.linalg.norm(g)
    if nf == 0.0 or ng == 0.0:
        return 0.0
    c = float(np.dot(f, g)) / (float(nf) * float(ng))
    c = min(max(c, 0.0), 1.0)
    return c**exponent


def _axis_bins(src: np.ndarray, tgt: np.ndarray, denom: float, bins: int) -> np.ndarray:
    """Bin index per (source, target) coordinate pair along one axis."""
    o = tgt[None, :] - src[:, None]
    t = (o / denom + 1.0) / 2.0 * bins
    idx = np.floor(t).astype(np.int32)
    np.clip(idx, 0, bins - 1, out=idx)
    return idx


def _denominators(cfg: RhmConfig, target_dims: tuple[int, int]) -> tuple[float, float]:
    if cfg.fixed_range is not None:
        return float(cfg.fixed_range), float(cfg.fixed_range)
    h, w = target_dims
    return float(h), float(w)


def offset_bin(
    src_coord: tuple[float, float],
    tgt_coord: tuple[float, float],
    cfg: RhmConfig,
    target_dims: tuple[int, int],
) -> tuple[int, int]:
    """Vote-grid cell of the offset tgt_coord - src_coord, clamped to range."""
    dy, dx = _denominators(cfg, target_dims)
    by = _axis_bins(
        np.array([src_coord[0]], np.float64), np.array([tgt_coord[0]], np.float64),
        dy, cfg.bins_y,
    )
    bx = _axis_bins(
        np.array([src_coord[1]], np.float64), np.array([tgt_coord[1]], np.float64),
        dx, cfg.bins_x,
    )
    return int(by[0, 0]), int(bx[0, 0])


def apply_hough_weighting(similarity: np.ndarray, bins: np.ndarray, n_bins: int) -> np.ndarray:
    """Reference weighting core: confidence = similarity * own-bin vote mass.

    ``similarity`` holds nonnegative appearance scores and ``bins`` the
    flat vote-bin index of each entry.  Kept as a tiny standalone
    function so its algebra can be tested directly; the chunked kernel
    computes exactly this.
    """
    votes = np.bincount(bins.ravel(), weights=similarity.ravel(), minlength=n_bins)
    return similarity * votes[bins]


def _unit_rows(features: np.ndarray) -> np.ndarray:
    """(H, W, D) float32 -> (H*W, D) float64 rows of unit norm (zeros stay zero)."""
    flat = features.reshape(-1, features.shape[2]).astype(np.float64)
    norms = np.linalg.norm(flat, axis=1)
    out = np.zeros_like(flat)
    np.divide(flat, norms[:, None], out=out, where=norms[:, None] > 0.0)
    return out


def _pow_int(arr: np.ndarray, exponent: int) -> np.ndarray:
    """In-place integer power by repeated squaring.

    The d=2 and d=3 shortcuts perform the same multiplications in the
    same order as the general loop, just without the scratch copy.
    """
    if exponent == 1:
        return arr
    if exponent == 2:
        arr *= arr
        return arr
    if exponent == 3:
        sq = arr * arr
        arr *= sq
        return arr
    base = arr.copy()
    e = exponent - 1
    while True:
        if e & 1:
            arr *= base
        e >>= 1
        if not e:
            return arr
        base *= base


def _chunk_ranges(n: int) -> list[tuple[int, int]]:
    return [(a, min(a + CHUNK_CELLS, n)) for a in range(0, n, CHUNK_CELLS)]


def _run(src: HyperImage, tgt: HyperImage, cfg: RhmConfig, threads: int | None, mode: str):
    """Shared chunked kernel.  mode: 'match', 'nn', or 'hough'."""
    if src.dim != tgt.dim:
        raise ValueError(
            f"feature dimension mismatch: source {src.dim}, target {tgt.dim}"
        )
    n_workers = resolve_threads(threads)
    u_src = _unit_rows(src.features)
    u_tgt_t = _unit_rows(tgt.features).T
    n_src = u_src.shape[0]
    n_tgt = u_tgt_t.shape[1]

    keep_conf = mode in ("match", "nn")
    want_votes = mode in ("match", "hough")
    conf = np.empty((n_src, n_tgt), np.float64) if keep_conf else None

    if want_votes:
        w_s = src.grid_width
        w_t = tgt.grid_width
        ys_s, xs_s = src.cell_coords()
        ys_t, xs_t = tgt.cell_coords()
        dy, dx = _denominators(cfg, tgt.image_dims)
        by_scaled = _axis_bins(ys_s, ys_t, dy, cfg.bins_y) * np.int32(cfg.bins_x)
        bx = _axis_bins(xs_s, xs_t, dx, cfg.bins_x)
        row_i = np.arange(n_src) // w_s
        row_j = np.arange(n_src) % w_s
        col_i = np.arange(n_tgt) // w_t
        col_j = np.arange(n_tgt) % w_t
        n_bins = cfg.bins_y * cfg.bins_x

    chunks = _chunk_ranges(n_src)
    bins_cache: list[np.ndarray | None] = [None] * len(chunks)

    def chunk_bins(k: int) -> np.ndarray:
        a, b = chunks[k]
        return by_scaled[np.ix_(row_i[a:b], col_i)] + bx[np.ix_(row_j[a:b], col_j)]

    def pass_one(k: int):
        a, b = chunks[k]
        s = u_src[a:b] @ u_tgt_t
        np.clip(s, 0.0, 1.0, out=s)
        _pow_int(s, cfg.exponent)
        if keep_conf:
            conf[a:b] = s
        if want_votes:
            bc = chunk_bins(k)
            if mode == "match":
                bins_cache[k] = bc
            return np.bincount(bc.ravel(), weights=s.ravel(), minlength=n_bins)
        return None

    partials = ordered_map(pass_one, range(len(chunks)), n_workers)

    if want_votes:
        votes = np.zeros(n_bins, np.float64)
        for p in partials:  # fixed merge order, independent of thread count
            votes += p

    if mode == "match":

        def pass_two(k: int):
            a, b = chunks[k]
            conf[a:b] *= votes[bins_cache[k]]
            bins_cache[k] = None

        ordered_map(pass_two, range(len(chunks)), n_workers)

    if mode == "hough":
        return votes.reshape(cfg.bins_y, cfg.bins_x)
    return conf


def match(
    src: HyperImage, tgt: HyperImage, cfg: RhmConfig = RhmConfig(), threads: int | None = None
) -> ConfidenceTensor:
    """Full matching: appearance scores reweighted by offset-bin votes."""
    conf = _run(src, tgt, cfg, threads, "match")
    return ConfidenceTensor(
        values=conf,
        src_grid=(src.grid_height, src.grid_width),
        tgt_grid=(tgt.grid_height, tgt.grid_width),
    )


def match_nn_only(
    src: HyperImage, tgt: HyperImage, cfg: RhmConfig = RhmConfig(), threads: int | None = None
) -> ConfidenceTensor:
    """Appearance-only baseline: confidences are the raw similarity powers."""
    conf = _run(src, tgt, cfg, threads, "nn")
    return ConfidenceTensor(
        values=conf,
        src_grid=(src.grid_height, src.grid_width),
        tgt_grid=(tgt.grid_height, tgt.grid_width),
    )


def hough_histogram(
    src: HyperImage, tgt: HyperImage, cfg: RhmConfig = RhmConfig(), threads: int | None = None
) -> HoughHistogram:
    """The vote table alone; its total equals the sum of all appearance scores."""
    return HoughHistogram(votes=_run(src, tgt, cfg, threads, "hough"))
