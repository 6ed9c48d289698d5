"""Writer for the HFM1 multi-layer feature container.

Layout (little-endian integers, IEEE-754 floats):

    bytes 0-3   magic "HFM1"
    u32         format_version (= 1)
    u32         image_id_len, then that many UTF-8 bytes
    u32         image_height
    u32         image_width
    u32         layer_count
    per layer:
        u32 layer_id, u32 C, u32 H, u32 W
        f32 stride_y, f32 stride_x, f32 offset_y, f32 offset_x, f32 rf_size
        C*H*W f32 values, row-major (C outermost, then H, then W)

This module only writes; consumers read the files with their own tools.
Validation here mirrors the reader-side invariants (finite values,
positive dims, strictly increasing layer ids, cell centers within one
receptive field of the image border) so an exported file is never
rejected downstream.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"HFM1"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayerRecord:
    layer_id: int
    values: np.ndarray  # (C, H, W), converted to f32 on write
    stride_y: float
    stride_x: float
    offset_y: float
    offset_x: float
    rf_size: float


def _validate(record: LayerRecord, image_dims: tuple[int, int]):
    if record.layer_id < 0:
        raise ValueError(f"layer_id must be >= 0, got {record.layer_id}")
    if record.values.ndim != 3 or min(record.values.shape) < 1:
        raise ValueError(
            f"layer {record.layer_id}: values must be (C, H, W), "
            f"got shape {record.values.shape}"
        )
    if not (record.stride_y > 0 and record.stride_x > 0 and record.rf_size > 0):
        raise ValueError(f"layer {record.layer_id}: strides and rf must be positive")
    for name in ("stride_y", "stride_x", "offset_y", "offset_x", "rf_size"):
        if not math.isfinite(getattr(record, name)):
            raise ValueError(f"layer {record.layer_id}: {name} is not finite")
    # Center span check, one rf of overhang allowed per side.
    _, h, w = record.values.shape
    for dim, off, stride, n in (
        (image_dims[0], record.offset_y, record.stride_y, h),
        (image_dims[1], record.offset_x, record.stride_x, w),
    ):
        if off < -record.rf_size or off + (n - 1) * stride > dim + record.rf_size:
            raise ValueError(
                f"layer {record.layer_id}: cell centers exceed image plus rf margin"
            )


def write_stack(
    path,
    image_id: str,
    image_dims: tuple[int, int],
    layers: list[LayerRecord],
) -> None:
    """Write one image's layers to ``path``; layers must be id-sorted."""
    img_h, img_w = image_dims
    if img_h < 1 or img_w < 1:
        raise ValueError(f"image dims must be positive, got {image_dims}")
    if not layers:
        raise ValueError("stack must contain at least one layer")
    ids = [r.layer_id for r in layers]
    if any(b <= a for a, b in zip(ids, ids[1:])):
        raise ValueError(f"layer ids must be strictly increasing, got {ids}")

    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    ident = image_id.encode("utf-8")
    parts.append(struct.pack("<I", len(ident)))
    parts.append(ident)
    parts.append(struct.pack("<III", img_h, img_w, len(layers)))
    for r in layers:
        _validate(r, image_dims)
        vals = np.ascontiguousarray(r.values, dtype="<f4")
        if not np.isfinite(vals).all():
            raise ValueError(f"layer {r.layer_id}: non-finite activation values")
        c, h, w = vals.shape
        parts.append(
            struct.pack(
                "<IIIIfffff",
                r.layer_id, c, h, w,
                r.stride_y, r.stride_x, r.offset_y, r.offset_x, r.rf_size,
            )
        )
        parts.append(vals.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))
