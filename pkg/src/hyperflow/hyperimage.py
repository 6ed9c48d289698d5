"""Multi-layer hyperpixel grids: assembly, coordinate mapping, neighbor queries.

A hyperimage concatenates one base layer with any number of coarser
layers, each upsampled to the base grid, so that every base-grid position
carries one long feature vector plus an image-space coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .feature_io import FeatureStack, LayerGeometry


@dataclass(frozen=True)
class LayerSet:
    """Selected layers: the base (defines the grid) plus the rest, in order."""

    base: int
    rest: tuple[int, ...] = ()

    def __post_init__(self):
        rest = tuple(self.rest)
        if self.base in rest:
            raise ValueError(f"base layer {self.base} repeated in rest {rest}")
        if len(set(rest)) != len(rest):
            raise ValueError(f"duplicate layer ids in rest {rest}")
        object.__setattr__(self, "rest", rest)

    @classmethod
    def from_ids(cls, ids) -> "LayerSet":
        """Build with the smallest id as base and the rest ascending."""
        ids = sorted(set(int(i) for i in ids))
        if not ids:
            raise ValueError("layer set must be non-empty")
        return cls(base=ids[0], rest=tuple(ids[1:]))

    def all_ids(self) -> tuple[int, ...]:
        return (self.base,) + self.rest

    def __len__(self) -> int:
        return 1 + len(self.rest)


@dataclass(frozen=True)
class Hyperpixel:
    position: tuple[int, int]  # grid indices (i, j)
    coord: tuple[float, float]  # image pixels (y, x)
    feature: np.ndarray  # length-D view, read-only


@dataclass(frozen=True)
class HyperImage:
    """Co-registered multi-layer feature grid at the base layer's resolution."""

    features: np.ndarray  # (H_b, W_b, D) float32, read-only
    geometry: LayerGeometry  # base layer's grid-to-image mapping
    image_dims: tuple[int, int]  # (height, width) pixels
    channel_spans: tuple[tuple[int, int, int], ...]  # (layer_id, start, stop)

    def __post_init__(self):
        f = self.features
        if f.ndim != 3:
            raise ValueError(f"features must be (H, W, D), got shape {f.shape}")
        f.flags.writeable = False
        object.__setattr__(self, "channel_spans", tuple(self.channel_spans))

    @property
    def grid_height(self) -> int:
        return self.features.shape[0]

    @property
    def grid_width(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    def channel_slice(self, layer_id: int) -> slice:
        for lid, start, stop in self.channel_spans:
            if lid == layer_id:
                return slice(start, stop)
        raise KeyError(f"layer {layer_id} not part of this hyperimage")

    def cell_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-axis image coordinates of all grid rows and columns."""
        g = self.geometry
        ys = g.offset_y + np.arange(self.grid_height, dtype=np.float64) * g.stride_y
        xs = g.offset_x + np.arange(self.grid_width, dtype=np.float64) * g.stride_x
        return ys, xs


def _axis_samples(src_n: int, dst_n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bilinear sample indices/weights for one axis, align-corners-false.

    The source coordinate of destination index t is (t + 0.5) * src/dst - 0.5,
    clamped to the valid range.  Computed as an exact integer numerator over
    2*dst so that coordinates that land on a source cell do so exactly.
    """
    t = np.arange(dst_n, dtype=np.float64)
    s = ((2.0 * t + 1.0) * src_n - dst_n) / (2.0 * dst_n)
    s = np.clip(s, 0.0, src_n - 1.0)
    i0 = np.floor(s).astype(np.intp)
    i1 = np.minimum(i0 + 1, src_n - 1)
    w = s - i0
    return i0, i1, w


def _upsample_bilinear(values: np.ndarray, dst_h: int, dst_w: int) -> np.ndarray:
    """Upsample (C, h, w) float to (C, dst_h, dst_w), replicating at borders."""
    vals = values.astype(np.float64, copy=False)
    i0, i1, wy = _axis_samples(vals.shape[1], dst_h)
    vals = vals[:, i0, :] * (1.0 - wy)[None, :, None] + vals[:, i1, :] * wy[None, :, None]
    j0, j1, wx = _axis_samples(values.shape[2], dst_w)
    vals = vals[:, :, j0] * (1.0 - wx)[None, None, :] + vals[:, :, j1] * wx[None, None, :]
    return vals


def assemble(stack: FeatureStack, layers: LayerSet) -> HyperImage:
    """Concatenate the selected layers into one grid at base resolution.

    Non-base layers are upsampled with bilinear interpolation
    (align-corners-false with clamped borders) and appended along
    channels in ``layers`` order, base block first.  The base layer must
    be the spatially largest of the selection.
    """
    available = {m.layer_id: m for m in stack.layers}
    for lid in layers.all_ids():
        if lid not in available:
            raise ValueError(
                f"stack {stack.image_id!r} has no layer {lid}; "
                f"available: {sorted(available)}"
            )
    base = available[layers.base]
    h_b, w_b = base.height, base.width
    for lid in layers.rest:
        m = available[lid]
        if m.height > h_b or m.width > w_b:
            raise ValueError(
                f"base layer {layers.base} ({h_b}x{w_b}) is smaller than "
                f"selected layer {lid} ({m.height}x{m.width})"
            )

    blocks = [np.moveaxis(base.values, 0, 2).astype(np.float32)]
    spans = [(layers.base, 0, base.channels)]
    pos = base.channels
    for lid in layers.rest:
        m = available[lid]
        up = _upsample_bilinear(m.values, h_b, w_b)
        blocks.append(np.moveaxis(up, 0, 2).astype(np.float32))
        spans.append((lid, pos, pos + m.channels))
        pos += m.channels
    features = np.ascontiguousarray(np.concatenate(blocks, axis=2))
    return HyperImage(
        features=features,
        geometry=base.geometry,
        image_dims=(stack.image_height, stack.image_width),
        channel_spans=tuple(spans),
    )


def hyperpixel_at(h: HyperImage, p: tuple[int, int]) -> Hyperpixel:
    """The hyperpixel at grid position p = (i, j)."""
    i, j = p
    if not (0 <= i < h.grid_height and 0 <= j < h.grid_width):
        raise ValueError(
            f"position {p} outside grid {h.grid_height}x{h.grid_width}"
        )
    g = h.geometry
    return Hyperpixel(
        position=(i, j),
        coord=(g.offset_y + i * g.stride_y, g.offset_x + j * g.stride_x),
        feature=h.features[i, j],
    )


def neighbors_covering(h: HyperImage, keypoint: tuple[float, float]) -> list[Hyperpixel]:
    """All hyperpixels whose receptive field contains the keypoint.

    Receptive fields are axis-aligned squares of side ``rf_size``
    centered on the cell coordinate; containment is inclusive on the
    boundary, so a keypoint exactly on an edge belongs to both cells.
    """
    ky, kx = keypoint
    img_h, img_w = h.image_dims
    if not (0.0 <= ky <= img_h and 0.0 <= kx <= img_w):
        raise ValueError(f"keypoint {keypoint} outside image {img_h}x{img_w}")
    g = h.geometry
    half = g.rf_size / 2.0

    def axis_hits(k: float, offset: float, stride: float, n: int) -> list[int]:
        lo = max(0, int(np.floor((k - half - offset) / stride)) - 1)
        hi = min(n - 1, int(np.ceil((k + half - offset) / stride)) + 1)
        return [i for i in range(lo, hi + 1) if abs(offset + i * stride - k) <= half]

    rows = axis_hits(ky, g.offset_y, g.stride_y, h.grid_height)
    cols = axis_hits(kx, g.offset_x, g.stride_x, h.grid_width)
    return [hyperpixel_at(h, (i, j)) for i in rows for j in cols]
