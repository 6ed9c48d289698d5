"""Keypoint-transfer accuracy over annotated image pairs.

A pair is correct at threshold alpha when the predicted target keypoint
lands within alpha times the larger side of the reference region, which
is either the whole target image or the target bounding box.  Scores
are averaged per pair first, then across pairs, so pairs with many
keypoints do not dominate.

Annotations travel as JSON lines, one pair per line, with keys
``pair_id, src_image, tgt_image, category, src_kps, tgt_kps, src_bbox,
tgt_bbox, src_dims, tgt_dims`` and optional difficulty labels
``viewpoint, scale, truncation, occlusion``.  Keypoints are ``[y, x]``
and boxes ``[y, x, h, w]`` in pixels.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .feature_io import FeatureStack
from .flow import KeypointPrediction, form_flow, transfer_all
from .hyperimage import HyperImage, LayerSet, assemble
from .parallel import ordered_map, resolve_threads
from .rhm import RhmConfig, match

VIEWPOINT_LEVELS = ("easy", "medi", "hard")
SCALE_LEVELS = ("easy", "medi", "hard")
TRUNCATION_LEVELS = ("none", "src", "tgt", "both")
OCCLUSION_LEVELS = ("none", "src", "tgt", "both")

_BUCKET_LEVELS = {
    "viewpoint": VIEWPOINT_LEVELS,
    "scale": SCALE_LEVELS,
    "truncation": TRUNCATION_LEVELS,
    "occlusion": OCCLUSION_LEVELS,
}

_REQUIRED_KEYS = (
    "pair_id", "src_image", "tgt_image", "category",
    "src_kps", "tgt_kps", "src_bbox", "tgt_bbox", "src_dims", "tgt_dims",
)
_OPTIONAL_KEYS = ("viewpoint", "scale", "truncation", "occlusion")


def _check_bbox(name: str, bbox, dims) -> tuple[float, float, float, float]:
    y, x, h, w = (float(v) for v in bbox)
    if h <= 0 or w <= 0:
        raise ValueError(f"{name} has nonpositive size: {bbox}")
    if y < 0 or x < 0 or y + h > dims[0] or x + w > dims[1]:
        raise ValueError(f"{name} {bbox} exceeds image dims {dims}")
    return (y, x, h, w)


def _check_kps(name: str, kps, dims) -> np.ndarray:
    arr = np.asarray(kps, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 1:
        raise ValueError(f"{name} must be a non-empty list of [y, x], got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    if arr.min() < 0 or np.any(arr[:, 0] > dims[0]) or np.any(arr[:, 1] > dims[1]):
        raise ValueError(f"{name} has keypoints outside image dims {dims}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class PairAnnotation:
    """Ground truth for one source/target image pair."""

    pair_id: str
    src_image: str
    tgt_image: str
    category: str
    src_kps: np.ndarray  # (N, 2) float64 [y, x]
    tgt_kps: np.ndarray  # (N, 2) float64 [y, x]
    src_bbox: tuple[float, float, float, float]  # [y, x, h, w]
    tgt_bbox: tuple[float, float, float, float]
    src_dims: tuple[int, int]  # (height, width)
    tgt_dims: tuple[int, int]
    viewpoint: str | None = None
    scale: str | None = None
    truncation: str | None = None
    occlusion: str | None = None

    def __post_init__(self):
        me = f"pair {self.pair_id!r}"
        sd = (int(self.src_dims[0]), int(self.src_dims[1]))
        td = (int(self.tgt_dims[0]), int(self.tgt_dims[1]))
        if min(sd) < 1 or min(td) < 1:
            raise ValueError(f"{me}: image dims must be positive")
        object.__setattr__(self, "src_dims", sd)
        object.__setattr__(self, "tgt_dims", td)
        object.__setattr__(self, "src_kps", _check_kps(f"{me}: src_kps", self.src_kps, sd))
        object.__setattr__(self, "tgt_kps", _check_kps(f"{me}: tgt_kps", self.tgt_kps, td))
        if self.src_kps.shape[0] != self.tgt_kps.shape[0]:
            raise ValueError(
                f"{me}: keypoint count mismatch "
                f"({self.src_kps.shape[0]} vs {self.tgt_kps.shape[0]})"
            )
        object.__setattr__(self, "src_bbox", _check_bbox(f"{me}: src_bbox", self.src_bbox, sd))
        object.__setattr__(self, "tgt_bbox", _check_bbox(f"{me}: tgt_bbox", self.tgt_bbox, td))
        for attr in _OPTIONAL_KEYS:
            v = getattr(self, attr)
            if v is not None and v not in _BUCKET_LEVELS[attr]:
                raise ValueError(
                    f"{me}: {attr} must be one of {_BUCKET_LEVELS[attr]}, got {v!r}"
                )

    @classmethod
    def from_dict(cls, d: dict) -> "PairAnnotation":
        missing = [k for k in _REQUIRED_KEYS if k not in d]
        if missing:
            raise ValueError(f"missing keys {missing}")
        kw = {k: d[k] for k in _REQUIRED_KEYS}
        kw.update({k: d[k] for k in _OPTIONAL_KEYS if d.get(k) is not None})
        return cls(**kw)

    def to_dict(self) -> dict:
        d = {
            "pair_id": self.pair_id,
            "src_image": self.src_image,
            "tgt_image": self.tgt_image,
            "category": self.category,
            "src_kps": self.src_kps.tolist(),
            "tgt_kps": self.tgt_kps.tolist(),
            "src_bbox": list(self.src_bbox),
            "tgt_bbox": list(self.tgt_bbox),
            "src_dims": list(self.src_dims),
            "tgt_dims": list(self.tgt_dims),
        }
        for attr in _OPTIONAL_KEYS:
            v = getattr(self, attr)
            if v is not None:
                d[attr] = v
        return d


def load_annotations(path) -> list[PairAnnotation]:
    """Parse a JSONL annotation file; errors carry the line number."""
    out = []
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        for n, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}: line {n}: invalid JSON: {e}") from None
            try:
                ann = PairAnnotation.from_dict(d)
            except (ValueError, TypeError) as e:
                raise ValueError(f"{path}: line {n}: {e}") from None
            if ann.pair_id in seen:
                raise ValueError(f"{path}: line {n}: duplicate pair_id {ann.pair_id!r}")
            seen.add(ann.pair_id)
            out.append(ann)
    return out


def write_annotations(pairs: Sequence[PairAnnotation], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(json.dumps(p.to_dict()) + "\n")


@dataclass(frozen=True)
class PckConfig:
    """Correctness threshold: alpha times the reference region's long side."""

    alpha: float = 0.1
    reference: str = "img"  # "img": target image dims; "bbox": target box

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.reference not in ("img", "bbox"):
            raise ValueError(f"reference must be 'img' or 'bbox', got {self.reference!r}")


def pck_threshold(cfg: PckConfig, ann: PairAnnotation) -> float:
    """Pixel distance threshold for one pair, from the target side."""
    if cfg.reference == "img":
        h, w = ann.tgt_dims
    else:
        _, _, h, w = ann.tgt_bbox
    return cfg.alpha * max(h, w)


def keypoint_correct(
    pred: tuple[float, float],
    gt: tuple[float, float],
    cfg: PckConfig,
    ref_dims: tuple[float, float],
) -> bool:
    """Whether pred lies within alpha * max(ref_dims) of gt (inclusive)."""
    h, w = float(ref_dims[0]), float(ref_dims[1])
    if h <= 0 or w <= 0:
        raise ValueError(f"reference dims must be positive, got {ref_dims}")
    dy = float(pred[0]) - float(gt[0])
    dx = float(pred[1]) - float(gt[1])
    return float(np.hypot(dy, dx)) <= cfg.alpha * max(h, w)


def _coord(p) -> tuple[float, float]:
    if isinstance(p, KeypointPrediction):
        return p.coord
    return (float(p[0]), float(p[1]))


def pck_pair(preds: Sequence, ann: PairAnnotation, cfg: PckConfig) -> float:
    """Fraction of this pair's keypoints transferred correctly."""
    if len(preds) != ann.tgt_kps.shape[0]:
        raise ValueError(
            f"pair {ann.pair_id!r}: {len(preds)} predictions for "
            f"{ann.tgt_kps.shape[0]} keypoints"
        )
    thr = pck_threshold(cfg, ann)
    hits = 0
    for p, gt in zip(preds, ann.tgt_kps):
        py, px = _coord(p)
        if np.hypot(py - gt[0], px - gt[1]) <= thr:
            hits += 1
    return hits / len(preds)


Pipeline = Callable[[PairAnnotation], Sequence]


def correspondence_pipeline(
    stacks: Mapping[str, FeatureStack],
    layers: LayerSet,
    rhm_cfg: RhmConfig = RhmConfig(),
    threads: int | None = None,
) -> Pipeline:
    """Standard pipeline: assemble both stacks, match, transfer keypoints."""

    def run(ann: PairAnnotation) -> list[KeypointPrediction]:
        try:
            src_stack = stacks[ann.src_image]
            tgt_stack = stacks[ann.tgt_image]
        except KeyError as e:
            raise ValueError(f"pair {ann.pair_id!r}: no stack for image {e.args[0]!r}") from None
        src = assemble(src_stack, layers)
        tgt = assemble(tgt_stack, layers)
        flow = form_flow(match(src, tgt, rhm_cfg, threads), src, tgt)
        return transfer_all(flow, src, ann.src_kps)

    return run


@dataclass(frozen=True)
class EvalReport:
    """Aggregated transfer accuracy with per-category and difficulty slices."""

    alpha: float
    reference: str
    overall: float | None  # None when no pair evaluated cleanly
    pair_count: int
    failed_count: int
    keypoint_count: int
    per_category: tuple[tuple[str, float, int], ...]  # (name, pck, pairs)
    buckets: tuple[tuple[str, tuple[tuple[str, float, int], ...]], ...]
    failures: tuple[tuple[str, str], ...]  # (pair_id, error)

    def to_json_dict(self) -> dict:
        return {
            "schema_version": 1,
            "alpha": self.alpha,
            "reference": self.reference,
            "overall": self.overall,
            "pairs": self.pair_count,
            "failed": self.failed_count,
            "keypoints": self.keypoint_count,
            "per_category": {
                name: {"pck": pck, "pairs": n} for name, pck, n in self.per_category
            },
            "buckets": {
                attr: {lvl: {"pck": pck, "pairs": n} for lvl, pck, n in rows}
                for attr, rows in self.buckets
            },
            "failures": [{"pair_id": p, "error": e} for p, e in self.failures],
        }

    def to_text(self) -> str:
        lines = [
            f"PCK@{self.alpha:g} ({self.reference}): "
            + (f"{self.overall:.4f}" if self.overall is not None else "n/a"),
            f"pairs: {self.pair_count} evaluated, {self.failed_count} failed",
            f"keypoints: {self.keypoint_count}",
        ]
        if self.per_category:
            lines.append("by category:")
            for name, pck, n in self.per_category:
                lines.append(f"  {name}: {pck:.4f} ({n} pairs)")
        for attr, rows in self.buckets:
            lines.append(f"by {attr}:")
            for lvl, pck, n in rows:
                lines.append(f"  {lvl}: {pck:.4f} ({n} pairs)")
        if self.failures:
            lines.append("failures:")
            for pid, err in self.failures:
                lines.append(f"  {pid}: {err}")
        return "\n".join(lines)


def evaluate_dataset(
    pairs: Sequence[PairAnnotation],
    pipeline: Pipeline,
    cfg: PckConfig = PckConfig(),
    threads: int | None = None,
) -> EvalReport:
    """Run the pipeline over every pair and aggregate PCK.

    Pair failures are collected, not raised; failed pairs are excluded
    from all averages.  Results do not depend on the thread count.
    """
    if not pairs:
        raise ValueError("no annotation pairs to evaluate")
    n_workers = resolve_threads(threads)

    def run(ann: PairAnnotation):
        try:
            preds = pipeline(ann)
            return pck_pair(preds, ann, cfg), ann.tgt_kps.shape[0], None
        except Exception as e:
            return None, 0, f"{type(e).__name__}: {e}"

    results = ordered_map(run, pairs, n_workers)

    scores: list[float] = []
    kp_total = 0
    failures: list[tuple[str, str]] = []
    by_cat: dict[str, list[float]] = {}
    by_bucket: dict[str, dict[str, list[float]]] = {}
    for ann, (score, nkp, err) in zip(pairs, results):
        if err is not None:
            failures.append((ann.pair_id, err))
            continue
        scores.append(score)
        kp_total += nkp
        by_cat.setdefault(ann.category, []).append(score)
        for attr in _OPTIONAL_KEYS:
            lvl = getattr(ann, attr)
            if lvl is not None:
                by_bucket.setdefault(attr, {}).setdefault(lvl, []).append(score)

    per_category = tuple(
        (name, float(np.mean(v)), len(v)) for name, v in sorted(by_cat.items())
    )
    buckets = tuple(
        (
            attr,
            tuple(
                (lvl, float(np.mean(by_bucket[attr][lvl])), len(by_bucket[attr][lvl]))
                for lvl in _BUCKET_LEVELS[attr]
                if lvl in by_bucket[attr]
            ),
        )
        for attr in _OPTIONAL_KEYS
        if attr in by_bucket
    )
    return EvalReport(
        alpha=cfg.alpha,
        reference=cfg.reference,
        overall=float(np.mean(scores)) if scores else None,
        pair_count=len(scores),
        failed_count=len(failures),
        keypoint_count=kp_total,
        per_category=per_category,
        buckets=buckets,
        failures=tuple(failures),
    )


@dataclass(frozen=True)
class BenchStats:
    """Wall-clock samples for repeated matching runs, in milliseconds."""

    samples_ms: tuple[float, ...]
    min_ms: float
    median_ms: float
    mean_ms: float


def bench_match(
    src: HyperImage,
    tgt: HyperImage,
    cfg: RhmConfig = RhmConfig(),
    repeats: int = 5,
    threads: int | None = None,
) -> BenchStats:
    """Time full matching runs.  One untimed warmup precedes the samples."""
    if repeats < 3:
        raise ValueError(f"repeats must be >= 3, got {repeats}")
    match(src, tgt, cfg, threads)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        match(src, tgt, cfg, threads)
        samples.append((time.perf_counter() - t0) * 1000.0)
    return BenchStats(
        samples_ms=tuple(samples),
        min_ms=min(samples),
        median_ms=float(statistics.median(samples)),
        mean_ms=float(statistics.fmean(samples)),
    )
