"""Beam search for the best-performing subset of feature layers.

Candidate subsets grow one layer per iteration.  A subset may only be
extended by a layer larger than its minimum, so every subset is reached
through exactly one insertion order and none is enumerated twice.  Each
iteration keeps the ``beam_size`` best-scoring subsets and the best
score ever seen is tracked separately; it only moves on strict
improvement, so earlier (smaller) subsets win ties.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .evaluation import PairAnnotation, PckConfig, correspondence_pipeline, pck_pair
from .feature_io import FeatureStack
from .hyperimage import LayerSet
from .rhm import RhmConfig

Evaluator = Callable[[tuple[int, ...]], float]
Trace = Callable[[int, tuple[int, ...], float], None]

DEFAULT_BEAM_SIZE = 4
DEFAULT_MAX_LAYERS = 8


@dataclass(frozen=True)
class SearchConfig:
    """Search space and budget: candidate ids, seed ids, beam, size cap."""

    candidates: tuple[int, ...]
    base_candidates: tuple[int, ...]
    beam_size: int = DEFAULT_BEAM_SIZE
    max_layers: int = DEFAULT_MAX_LAYERS

    def __post_init__(self):
        cand = tuple(sorted(set(int(c) for c in self.candidates)))
        base = tuple(sorted(set(int(b) for b in self.base_candidates)))
        if not cand:
            raise ValueError("candidates must be non-empty")
        if not base:
            raise ValueError("base_candidates must be non-empty")
        extra = [b for b in base if b not in cand]
        if extra:
            raise ValueError(f"base_candidates {extra} are not candidates")
        if self.beam_size < 1:
            raise ValueError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.max_layers < 1:
            raise ValueError(f"max_layers must be >= 1, got {self.max_layers}")
        object.__setattr__(self, "candidates", cand)
        object.__setattr__(self, "base_candidates", base)


class BeamMemory:
    """Scored layer subsets with deterministic best-first ordering.

    Higher score ranks first; equal scores rank the lexicographically
    smaller sorted tuple first.
    """

    def __init__(self):
        self._scores: dict[tuple[int, ...], float] = {}

    def __contains__(self, layers) -> bool:
        return tuple(sorted(layers)) in self._scores

    def __len__(self) -> int:
        return len(self._scores)

    def insert(self, layers, score: float) -> None:
        self._scores[tuple(sorted(layers))] = float(score)

    def find_best_n(self, n: int) -> list[tuple[tuple[int, ...], float]]:
        ranked = sorted(self._scores.items(), key=lambda kv: (-kv[1], kv[0]))
        return ranked[:n]

    def find_best(self) -> tuple[tuple[int, ...], float]:
        if not self._scores:
            raise ValueError("memory is empty")
        return self.find_best_n(1)[0]


def search(
    cfg: SearchConfig, evaluator: Evaluator, trace: Trace | None = None
) -> tuple[LayerSet, float]:
    """Run the beam search, returning the best subset and its score.

    The evaluator receives each candidate subset as a sorted tuple,
    exactly once per subset.  ``trace`` (if given) is called with
    (iteration, subset, score) for every evaluation.
    """

    def scored(iteration: int, layers: tuple[int, ...]) -> float:
        v = float(evaluator(layers))
        if trace is not None:
            trace(iteration, layers, v)
        return v

    mem = BeamMemory()
    for lid in cfg.base_candidates:
        t = (lid,)
        mem.insert(t, scored(0, t))
    beam = mem.find_best_n(cfg.beam_size)
    selected, best = beam[0]

    for iteration in range(1, cfg.max_layers):
        children = BeamMemory()
        for layers, _ in beam:
            lo = min(layers)
            present = set(layers)
            for lid in cfg.candidates:
                if lid <= lo or lid in present:
                    continue
                t = tuple(sorted(layers + (lid,)))
                if t in children:
                    continue
                children.insert(t, scored(iteration, t))
        beam = children.find_best_n(cfg.beam_size)
        if not beam:
            break
        top_layers, top_score = beam[0]
        if top_score > best:
            selected, best = top_layers, top_score

    return LayerSet.from_ids(selected), best


def make_pck_evaluator(
    pairs: Sequence[PairAnnotation],
    stacks: Mapping[str, FeatureStack],
    rhm_cfg: RhmConfig = RhmConfig(),
    pck_cfg: PckConfig = PckConfig(),
    threads: int | None = None,
) -> Evaluator:
    """Score a layer subset by mean PCK over validation pairs.

    Results are cached per subset, so re-examined subsets cost nothing.
    Pipeline errors (missing stacks or layers) propagate.
    """
    if not pairs:
        raise ValueError("no validation pairs")
    cache: dict[tuple[int, ...], float] = {}

    def evaluate(layer_ids: tuple[int, ...]) -> float:
        key = tuple(sorted(int(l) for l in layer_ids))
        if key in cache:
            return cache[key]
        pipe = correspondence_pipeline(stacks, LayerSet.from_ids(key), rhm_cfg, threads)
        scores = [pck_pair(pipe(a), a, pck_cfg) for a in pairs]
        cache[key] = float(np.mean(scores))
        return cache[key]

    return evaluate
