"""Dense flow from match confidences, and keypoint transfer through it.

The flow sends every source grid cell to its best-scoring target cell.
A query keypoint is carried across by the cells whose receptive fields
cover it: each one proposes its own target coordinate plus the
keypoint's displacement from the cell center, and the proposals are
averaged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence, TextIO

import numpy as np

from .hyperimage import HyperImage, neighbors_covering
from .rhm import ConfidenceTensor


@dataclass(frozen=True)
class Flow:
    """Best target coordinate and confidence for every source grid cell."""

    grid: tuple[int, int]  # source grid (H, W)
    src_coords: np.ndarray  # (N, 2) float64, cell centers (y, x)
    tgt_coords: np.ndarray  # (N, 2) float64, matched coordinates (y, x)
    confidence: np.ndarray  # (N,) float64
    target_index: np.ndarray  # (N,) int64, flat target cell index

    def __post_init__(self):
        n = self.grid[0] * self.grid[1]
        for name in ("src_coords", "tgt_coords"):
            arr = getattr(self, name)
            if arr.shape != (n, 2):
                raise ValueError(f"{name} must have shape ({n}, 2), got {arr.shape}")
        if self.confidence.shape != (n,):
            raise ValueError(f"confidence must have shape ({n},)")
        if self.target_index.shape != (n,):
            raise ValueError(f"target_index must have shape ({n},)")
        for name in ("src_coords", "tgt_coords", "confidence", "target_index"):
            getattr(self, name).flags.writeable = False


@dataclass(frozen=True)
class KeypointPrediction:
    coord: tuple[float, float]  # predicted target-image (y, x)
    neighbors: int  # cells whose receptive field covered the query


def form_flow(conf: ConfidenceTensor, src: HyperImage, tgt: HyperImage) -> Flow:
    """Pick the highest-confidence target cell per source cell.

    Ties go to the smallest flat target index (first maximum).
    """
    if conf.src_grid != (src.grid_height, src.grid_width):
        raise ValueError(
            f"confidence source grid {conf.src_grid} does not match "
            f"hyperimage grid {(src.grid_height, src.grid_width)}"
        )
    if conf.tgt_grid != (tgt.grid_height, tgt.grid_width):
        raise ValueError(
            f"confidence target grid {conf.tgt_grid} does not match "
            f"hyperimage grid {(tgt.grid_height, tgt.grid_width)}"
        )
    idx = np.argmax(conf.values, axis=1)
    best = conf.values[np.arange(idx.shape[0]), idx]

    tys, txs = tgt.cell_coords()
    w_t = tgt.grid_width
    tgt_coords = np.stack([tys[idx // w_t], txs[idx % w_t]], axis=1)

    sys_, sxs = src.cell_coords()
    gy, gx = np.meshgrid(sys_, sxs, indexing="ij")
    src_coords = np.stack([gy.ravel(), gx.ravel()], axis=1)

    return Flow(
        grid=(src.grid_height, src.grid_width),
        src_coords=src_coords,
        tgt_coords=tgt_coords,
        confidence=best,
        target_index=idx.astype(np.int64),
    )


def transfer_keypoint(
    flow: Flow, src: HyperImage, keypoint: tuple[float, float]
) -> KeypointPrediction:
    """Carry one source keypoint to the target image.

    Averages T(x_q) + (keypoint - x_q) over all cells q whose receptive
    field contains the keypoint.  Raises if no field covers it.
    """
    if flow.grid != (src.grid_height, src.grid_width):
        raise ValueError(
            f"flow grid {flow.grid} does not match hyperimage grid "
            f"{(src.grid_height, src.grid_width)}"
        )
    hood = neighbors_covering(src, keypoint)
    if not hood:
        raise ValueError(
            f"no receptive field covers keypoint {tuple(keypoint)}; "
            f"rf_size {src.geometry.rf_size} is too small for this grid"
        )
    ky, kx = float(keypoint[0]), float(keypoint[1])
    w = flow.grid[1]
    acc_y = 0.0
    acc_x = 0.0
    for p in hood:
        q = p.position[0] * w + p.position[1]
        acc_y += flow.tgt_coords[q, 0] + (ky - p.coord[0])
        acc_x += flow.tgt_coords[q, 1] + (kx - p.coord[1])
    n = len(hood)
    return KeypointPrediction(coord=(acc_y / n, acc_x / n), neighbors=n)


def transfer_all(
    flow: Flow, src: HyperImage, keypoints: Sequence[tuple[float, float]]
) -> list[KeypointPrediction]:
    """Transfer every keypoint; failures name the offending index."""
    out = []
    for k, kp in enumerate(keypoints):
        try:
            out.append(transfer_keypoint(flow, src, (float(kp[0]), float(kp[1]))))
        except ValueError as e:
            raise ValueError(f"keypoint {k}: {e}") from e
    return out


def flow_table_lines(flow: Flow) -> Iterator[str]:
    """Rows of ``i j y_src x_src y_tgt x_tgt conf`` with 6 decimals."""
    w = flow.grid[1]
    for q in range(flow.src_coords.shape[0]):
        i, j = divmod(q, w)
        sy, sx = flow.src_coords[q]
        ty, tx = flow.tgt_coords[q]
        yield (
            f"{i} {j} {sy:.6f} {sx:.6f} {ty:.6f} {tx:.6f} "
            f"{flow.confidence[q]:.6f}"
        )


def write_flow_text(flow: Flow, stream: TextIO) -> None:
    for line in flow_table_lines(flow):
        stream.write(line + "\n")
