"""Hand-rolled reference implementations used to cross-check the kernels.

Kept deliberately different in structure from the library code: cosines
are computed one source row at a time, offset bins with scalar Python
arithmetic, and votes accumulated in a plain dict, so agreement with the
chunked kernel is meaningful double-entry bookkeeping.
"""

import math
from collections import defaultdict

import numpy as np


def bin_index(offset: float, denom: float, bins: int) -> int:
    t = (offset / denom + 1.0) / 2.0 * bins
    return min(max(math.floor(t), 0), bins - 1)


def rhm_reference(src_h, tgt_h, cfg):
    """Confidence matrix and flat vote table, straight from the definitions."""
    ws, wt = src_h.grid_width, tgt_h.grid_width
    n_src = src_h.grid_height * ws
    n_tgt = tgt_h.grid_height * wt

    src_flat = src_h.features.reshape(n_src, -1).astype(np.float64)
    tgt_flat = tgt_h.features.reshape(n_tgt, -1).astype(np.float64)
    tgt_norms = np.sqrt((tgt_flat**2).sum(axis=1))

    sims = np.zeros((n_src, n_tgt))
    for q in range(n_src):
        f = src_flat[q]
        fn = math.sqrt(float(f @ f))
        if fn == 0.0:
            continue
        with np.errstate(invalid="ignore", divide="ignore"):
            c = (tgt_flat @ f) / (fn * tgt_norms)
        c[tgt_norms == 0.0] = 0.0
        sims[q] = np.clip(c, 0.0, 1.0) ** cfg.exponent

    if cfg.fixed_range is not None:
        dy = dx = float(cfg.fixed_range)
    else:
        dy, dx = float(tgt_h.image_dims[0]), float(tgt_h.image_dims[1])

    def coords(h):
        g = h.geometry
        return (
            [g.offset_y + i * g.stride_y for i in range(h.grid_height)],
            [g.offset_x + j * g.stride_x for j in range(h.grid_width)],
        )

    sy, sx = coords(src_h)
    ty, tx = coords(tgt_h)
    by = [[bin_index(b - a, dy, cfg.bins_y) for b in ty] for a in sy]
    bx = [[bin_index(b - a, dx, cfg.bins_x) for b in tx] for a in sx]

    flat_bins = []
    votes = defaultdict(float)
    for q in range(n_src):
        i, j = divmod(q, ws)
        row = sims[q]
        brow = np.array(
            [by[i][t // wt] * cfg.bins_x + bx[j][t % wt] for t in range(n_tgt)],
            dtype=np.int64,
        )
        flat_bins.append(brow)
        for t in range(n_tgt):
            votes[int(brow[t])] += float(row[t])

    vflat = np.zeros(cfg.bins_y * cfg.bins_x)
    for b, v in votes.items():
        vflat[b] = v

    conf = np.empty_like(sims)
    for q in range(n_src):
        conf[q] = sims[q] * vflat[flat_bins[q]]
    return conf, vflat


def exhaustive_best(candidates, base, max_size, score_fn):
    """Best reachable subset by brute force: every subset of the candidates
    whose minimum is a base id, up to max_size, scored directly.  Ties go
    to the lexicographically smaller sorted tuple."""
    import itertools

    best_set, best_score = None, None
    for size in range(1, max_size + 1):
        for combo in itertools.combinations(sorted(candidates), size):
            if min(combo) not in base:
                continue
            s = float(score_fn(combo))
            if best_score is None or s > best_score or (
                s == best_score and combo < best_set
            ):
                best_set, best_score = combo, s
    return best_set, best_score


def max_rel_err(got: np.ndarray, ref: np.ndarray) -> float:
    """Largest elementwise relative error of got against ref.

    The denominator floor of 1e-12 times the reference peak only guards
    entries whose reference value is exactly or essentially zero; both
    sides carry float64 noise around 1e-15, so a genuine defect still
    shows up many orders of magnitude above any tolerance in use.
    """
    got = np.asarray(got, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    scale = np.abs(ref)
    peak = float(scale.max()) if scale.size else 0.0
    denom = np.maximum(scale, max(1e-12 * peak, np.finfo(np.float64).tiny))
    return float(np.max(np.abs(got - ref) / denom)) if scale.size else 0.0
