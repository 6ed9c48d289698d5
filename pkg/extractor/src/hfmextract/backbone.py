"""ResNet backbones with per-layer geometry and pre-activation capture.

Candidate feature layers are the stem convolution plus every bottleneck
block, each taken before its final ReLU:

    id 0        conv1 + bn1 output (pre-ReLU, pre-maxpool)
    id 1..L-1   each bottleneck's residual sum (post-add, pre-ReLU),
                walking layer1 through layer4 in order

which gives 17 layers for resnet50 and 34 for resnet101.  Geometry
(jump, receptive field, center offset) is derived by folding the actual
conv/pool attributes of the instantiated model through the recurrence in
:mod:`hfmextract.receptive`, so it cannot drift from the architecture.
Residual adds merge two paths; the reported geometry follows the conv
branch, whose receptive field dominates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
from torch import nn
from torchvision.models import resnet50, resnet101

from .receptive import INPUT_TRACE, GridTrace, SlidingOp

log = logging.getLogger("hfmextract")

ARCHITECTURES = ("resnet50", "resnet101")

_BUILDERS = {"resnet50": resnet50, "resnet101": resnet101}
_PRETRAINED = {"resnet50": "ResNet50_Weights.IMAGENET1K_V1",
               "resnet101": "ResNet101_Weights.IMAGENET1K_V1"}


class WeightsUnavailableError(RuntimeError):
    """Pretrained weights were requested but could not be loaded."""


@dataclass(frozen=True)
class LayerInfo:
    """One exportable layer: id, width, and network-space geometry."""

    layer_id: int
    channels: int
    trace: GridTrace


@dataclass(frozen=True)
class Backbone:
    """A frozen eval-mode ResNet plus its exportable-layer table."""

    architecture: str
    model: nn.Module
    layers: tuple[LayerInfo, ...]

    def layer_ids(self) -> tuple[int, ...]:
        return tuple(info.layer_id for info in self.layers)


def _op(m) -> SlidingOp:
    # Conv2d/MaxPool2d attributes may be ints or (h, w) tuples; the
    # backbones here are square everywhere.
    def scalar(v):
        return v[0] if isinstance(v, (tuple, list)) else v

    return SlidingOp(scalar(m.kernel_size), scalar(m.stride), scalar(m.padding))


def _enumerate_layers(model: nn.Module) -> tuple[LayerInfo, ...]:
    infos = []
    state = INPUT_TRACE.after(_op(model.conv1))
    infos.append(LayerInfo(0, model.conv1.out_channels, state))
    state = state.after(_op(model.maxpool))
    next_id = 1
    for stage in (model.layer1, model.layer2, model.layer3, model.layer4):
        for block in stage:
            for conv in (block.conv1, block.conv2, block.conv3):
                state = state.after(_op(conv))
            infos.append(LayerInfo(next_id, block.conv3.out_channels, state))
            next_id += 1
    return tuple(infos)


def load_backbone(architecture: str, weights: str = "auto", seed: int = 0) -> Backbone:
    """Build an eval-mode backbone.

    ``weights`` is ``"pretrained"`` (ImageNet, error if unavailable),
    ``"random"`` (deterministic init from ``seed``), or ``"auto"``
    (pretrained when loadable, otherwise fall back to random with a
    warning).  Random weights still give a usable matcher on near-
    duplicate images since convolution features stay translation
    equivariant regardless of training.
    """
    if architecture not in _BUILDERS:
        raise ValueError(
            f"unknown architecture {architecture!r}, expected one of {ARCHITECTURES}"
        )
    if weights not in ("auto", "pretrained", "random"):
        raise ValueError(f"weights must be auto|pretrained|random, got {weights!r}")

    build = _BUILDERS[architecture]
    model = None
    if weights in ("auto", "pretrained"):
        try:
            model = build(weights=_PRETRAINED[architecture])
        except Exception as e:
            if weights == "pretrained":
                raise WeightsUnavailableError(
                    f"pretrained weights for {architecture} unavailable: {e}"
                ) from e
            log.warning(
                "pretrained weights unavailable (%s); using seeded random init", e
            )
    if model is None:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            model = build(weights=None)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return Backbone(architecture, model, _enumerate_layers(model))


@torch.no_grad()
def forward_collect(
    backbone: Backbone, x: torch.Tensor, wanted: set[int] | None = None
) -> dict[int, torch.Tensor]:
    """Run ``x`` (1, 3, H, W) through the net, collecting pre-ReLU maps.

    ``wanted`` restricts which layer ids are kept; the forward pass stops
    after the deepest requested id.  The bottleneck arithmetic below
    mirrors torchvision's Bottleneck.forward, re-done inline because the
    stock module applies its final ReLU before anything can observe the
    residual sum.
    """
    model = backbone.model
    all_ids = set(backbone.layer_ids())
    if wanted is None:
        wanted = all_ids
    else:
        missing = wanted - all_ids
        if missing:
            raise ValueError(
                f"{backbone.architecture} has no layer(s) {sorted(missing)}"
            )
    deepest = max(wanted)

    out: dict[int, torch.Tensor] = {}
    x = model.bn1(model.conv1(x))
    if 0 in wanted:
        out[0] = x
    if deepest == 0:
        return out
    # torch.relu, not model.relu: the stock modules are inplace and
    # would zero the captured pre-activation tensors.
    x = model.maxpool(torch.relu(x))
    next_id = 1
    for stage in (model.layer1, model.layer2, model.layer3, model.layer4):
        for block in stage:
            identity = x
            y = block.relu(block.bn1(block.conv1(x)))
            y = block.relu(block.bn2(block.conv2(y)))
            y = block.bn3(block.conv3(y))
            if block.downsample is not None:
                identity = block.downsample(x)
            y = y + identity
            if next_id in wanted:
                out[next_id] = y
            if next_id == deepest:
                return out
            x = torch.relu(y)
            next_id += 1
    return out
