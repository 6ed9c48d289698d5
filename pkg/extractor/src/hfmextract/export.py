"""Image-to-feature-stack export.

Images are run through the backbone at a capped working size: when the
longer side exceeds ``max_side`` (default 300, roughly the working image
size the matcher is tuned for) the image is downscaled to that cap,
aspect preserved.  The stack header always records the ORIGINAL pixel
dimensions, and per-layer geometry is mapped back to original pixel
space, so downstream consumers never see network coordinates:

    stride = jump * s            s = orig_size / net_size, per axis
    offset = (offset_net + 0.5) * s - 0.5

(the half-pixel terms are the standard align-corners-false convention
for resampling).  Receptive fields stay square in the file format, so
``rf_size`` maps back through the geometric mean of the two axis scales.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .backbone import Backbone, forward_collect
from .hfmwrite import LayerRecord, write_stack

log = logging.getLogger("hfmextract")

DEFAULT_MAX_SIDE = 300
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm")

_MEAN = (0.485, 0.456, 0.406)
_STD = (0.229, 0.224, 0.225)


def load_image(path) -> Image.Image:
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except (OSError, ValueError) as e:
        raise OSError(f"cannot read image {path}: {e}") from e


def _working_size(h: int, w: int, max_side: int) -> tuple[int, int]:
    if max(h, w) <= max_side:
        return h, w
    scale = max_side / max(h, w)
    return max(1, round(h * scale)), max(1, round(w * scale))


def _to_tensor(img: Image.Image) -> torch.Tensor:
    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(_MEAN, dtype=np.float32)) / np.asarray(_STD, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1)).unsqueeze(0)


def export_image(
    backbone: Backbone,
    image_path,
    out_path,
    layer_ids=None,
    max_side: int = DEFAULT_MAX_SIDE,
) -> list[tuple[int, int, int, int]]:
    """Export one image; returns (layer_id, C, H, W) per written layer."""
    img = load_image(image_path)
    w0, h0 = img.size
    h_net, w_net = _working_size(h0, w0, max_side)
    if (h_net, w_net) != (h0, w0):
        img = img.resize((w_net, h_net), Image.Resampling.BILINEAR)

    wanted = None if layer_ids is None else set(layer_ids)
    maps = forward_collect(backbone, _to_tensor(img), wanted)

    sy = h0 / h_net
    sx = w0 / w_net
    records = []
    for info in backbone.layers:
        if info.layer_id not in maps:
            continue
        t = info.trace
        values = maps[info.layer_id].squeeze(0).numpy()
        records.append(
            LayerRecord(
                layer_id=info.layer_id,
                values=values,
                stride_y=t.jump * sy,
                stride_x=t.jump * sx,
                offset_y=(t.offset + 0.5) * sy - 0.5,
                offset_x=(t.offset + 0.5) * sx - 0.5,
                rf_size=t.rf * math.sqrt(sy * sx),
            )
        )
    write_stack(out_path, Path(image_path).stem, (h0, w0), records)
    return [(r.layer_id,) + r.values.shape for r in records]


def find_images(images_dir) -> list[Path]:
    root = Path(images_dir)
    if not root.is_dir():
        raise OSError(f"not a directory: {images_dir}")
    found = sorted(
        p for p in root.rglob("*")
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )
    stems: dict[str, Path] = {}
    for p in found:
        if p.stem in stems:
            raise ValueError(
                f"duplicate image stem {p.stem!r}: {stems[p.stem]} vs {p}"
            )
        stems[p.stem] = p
    return found


def export_dir(
    backbone: Backbone,
    images_dir,
    out_dir,
    layer_ids=None,
    max_side: int = DEFAULT_MAX_SIDE,
) -> int:
    """Export every image under ``images_dir`` to ``out_dir``/<stem>.hfm."""
    images = find_images(images_dir)
    if not images:
        raise ValueError(f"no images found under {images_dir}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, path in enumerate(images):
        export_image(backbone, path, out / f"{path.stem}.hfm", layer_ids, max_side)
        log.info("exported %s (%d/%d)", path.stem, i + 1, len(images))
    return len(images)
