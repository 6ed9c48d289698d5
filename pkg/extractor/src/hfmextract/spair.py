"""SPair-style pair annotations to the matcher's JSON-lines format.

Native input: one JSON object per pair under
``<root>/PairAnnotation/<split>/*.json`` with keys

    src_imname, trg_imname        image filenames
    category                      object class
    src_imsize, trg_imsize        [width, height, channels]
    src_kps, trg_kps              [[x, y], ...], equal lengths
    src_bndbox, trg_bndbox        [x_min, y_min, x_max, y_max]
    pair_id                       optional, filename stem otherwise
    viewpoint_variation, scale_variation    optional ints 0..2
    truncation, occlusion                   optional ints 0..3

Output: one JSON line per pair with y-first coordinates ([y, x] points,
[y, x, h, w] boxes), [h, w] image dims, image ids with extensions
stripped, and difficulty ints mapped to named levels:

    viewpoint/scale   0 -> easy, 1 -> medi, 2 -> hard
    trunc/occl        0 -> none, 1 -> src, 2 -> tgt, 3 -> both

Pairs with a keypoint count outside 3..30 are kept but flagged with a
warning; anything structurally off raises naming the offending file.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

log = logging.getLogger("hfmextract")

KP_COUNT_RANGE = (3, 30)

_VIEW_SCALE_LEVELS = {0: "easy", 1: "medi", 2: "hard"}
_TRUNC_OCCL_LEVELS = {0: "none", 1: "src", 2: "tgt", 3: "both"}

_REQUIRED = (
    "src_imname", "trg_imname", "category",
    "src_imsize", "trg_imsize",
    "src_kps", "trg_kps", "src_bndbox", "trg_bndbox",
)


class AnnotationSchemaError(ValueError):
    """Native annotation file deviates from the documented schema."""


@dataclass(frozen=True)
class ConvertStats:
    pairs: int
    flagged: tuple[tuple[str, int], ...]  # (pair_id, keypoint count)


def _yx_points(xy_list, name, path):
    pts = []
    for p in xy_list:
        if not isinstance(p, (list, tuple)) or len(p) != 2:
            raise AnnotationSchemaError(f"{path}: {name} entries must be [x, y]")
        x, y = p
        pts.append([float(y), float(x)])
    return pts


def _yx_box(box, name, path):
    if not isinstance(box, (list, tuple)) or len(box) != 4:
        raise AnnotationSchemaError(f"{path}: {name} must be [x1, y1, x2, y2]")
    x1, y1, x2, y2 = (float(v) for v in box)
    if not (x2 > x1 and y2 > y1):
        raise AnnotationSchemaError(f"{path}: {name} is empty or inverted")
    return [y1, x1, y2 - y1, x2 - x1]


def _dims(imsize, name, path):
    if not isinstance(imsize, (list, tuple)) or len(imsize) < 2:
        raise AnnotationSchemaError(f"{path}: {name} must be [width, height, ...]")
    w, h = int(imsize[0]), int(imsize[1])
    if h < 1 or w < 1:
        raise AnnotationSchemaError(f"{path}: {name} has nonpositive dims")
    return [h, w]


def _level(native, key, table, path):
    if key not in native or native[key] is None:
        return None
    v = native[key]
    if v not in table:
        raise AnnotationSchemaError(
            f"{path}: {key} must be one of {sorted(table)}, got {v!r}"
        )
    return table[v]


def convert_pair(native: dict, path, default_id: str) -> dict:
    """One native pair object to one output record."""
    missing = [k for k in _REQUIRED if k not in native]
    if missing:
        raise AnnotationSchemaError(f"{path}: missing key(s) {missing}")
    src_kps = _yx_points(native["src_kps"], "src_kps", path)
    tgt_kps = _yx_points(native["trg_kps"], "trg_kps", path)
    if len(src_kps) != len(tgt_kps):
        raise AnnotationSchemaError(
            f"{path}: src_kps and trg_kps lengths differ "
            f"({len(src_kps)} vs {len(tgt_kps)})"
        )
    record = {
        "pair_id": str(native.get("pair_id", default_id)),
        "src_image": Path(str(native["src_imname"])).stem,
        "tgt_image": Path(str(native["trg_imname"])).stem,
        "category": str(native["category"]),
        "src_kps": src_kps,
        "tgt_kps": tgt_kps,
        "src_bbox": _yx_box(native["src_bndbox"], "src_bndbox", path),
        "tgt_bbox": _yx_box(native["trg_bndbox"], "trg_bndbox", path),
        "src_dims": _dims(native["src_imsize"], "src_imsize", path),
        "tgt_dims": _dims(native["trg_imsize"], "trg_imsize", path),
    }
    for out_key, native_key, table in (
        ("viewpoint", "viewpoint_variation", _VIEW_SCALE_LEVELS),
        ("scale", "scale_variation", _VIEW_SCALE_LEVELS),
        ("truncation", "truncation", _TRUNC_OCCL_LEVELS),
        ("occlusion", "occlusion", _TRUNC_OCCL_LEVELS),
    ):
        level = _level(native, native_key, table, path)
        if level is not None:
            record[out_key] = level
    return record


def convert_annotations(spair_dir, out_path, split: str = "test") -> ConvertStats:
    """Convert every pair file of one split; returns counts and flags."""
    pair_dir = Path(spair_dir) / "PairAnnotation" / split
    if not pair_dir.is_dir():
        raise OSError(f"no pair annotations at {pair_dir}")
    files = sorted(pair_dir.glob("*.json"))
    if not files:
        raise OSError(f"no .json pair files under {pair_dir}")

    lines = []
    flagged = []
    seen: dict[str, Path] = {}
    lo, hi = KP_COUNT_RANGE
    for path in files:
        try:
            native = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise AnnotationSchemaError(f"{path}: not valid JSON ({e})") from e
        if not isinstance(native, dict):
            raise AnnotationSchemaError(f"{path}: top level must be an object")
        record = convert_pair(native, path, default_id=path.stem)
        pid = record["pair_id"]
        if pid in seen:
            raise AnnotationSchemaError(
                f"{path}: duplicate pair_id {pid!r} (first in {seen[pid]})"
            )
        seen[pid] = path
        n_kps = len(record["src_kps"])
        if not lo <= n_kps <= hi:
            log.warning("pair %s has %d keypoints (expected %d..%d), keeping",
                        pid, n_kps, lo, hi)
            flagged.append((pid, n_kps))
        lines.append(json.dumps(record))

    with open(out_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return ConvertStats(pairs=len(lines), flagged=tuple(flagged))
