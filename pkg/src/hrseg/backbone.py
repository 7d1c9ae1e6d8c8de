"""Six-scale classifier backbone.

A full-resolution stem (3x3 stride-1 conv + BN + ReLU) feeds six stages of
basic residual blocks. Stage 1 keeps the input resolution; the first block of
each of stages 2-6 downsamples by stride 2 with a 1x1 projection shortcut, so
stage s emits a [N, channels_s, H/2^(s-1), W/2^(s-1)] map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hrseg.layers import (
    batch_norm,
    conv2d,
    global_avg_pool,
    linear,
    make_bn,
    make_conv,
    make_linear,
    make_residual_block,
    relu,
    residual_block,
)
from hrseg.tensor import Tensor

DEFAULT_BLOCKS = (1, 1, 2, 4, 4, 4)
DEFAULT_CHANNELS = (50, 75, 125, 200, 320, 450)
NUM_SCALES = 6
DIVISOR = 2 ** (NUM_SCALES - 1)  # input sides must be divisible by 32


@dataclass
class ScaleSpec:
    scale_index: int  # 1..6
    num_blocks: int
    channels: int

    @property
    def output_divisor(self) -> int:
        return 2 ** (self.scale_index - 1)


@dataclass
class NetworkSpec:
    """Architecture hyperparameters; the defaults are the full-size network."""

    blocks: tuple = DEFAULT_BLOCKS
    channels: tuple = DEFAULT_CHANNELS
    num_classes: int = 19
    head_blocks_per_scale: int = 2
    merge_kernel: int = 3
    aux_supervision: bool = False

    def __post_init__(self):
        self.blocks = tuple(int(b) for b in self.blocks)
        self.channels = tuple(int(c) for c in self.channels)
        self.validate()

    def validate(self):
        if len(self.blocks) != NUM_SCALES or len(self.channels) != NUM_SCALES:
            raise ValueError(f"need exactly {NUM_SCALES} scales, got {len(self.blocks)} blocks / {len(self.channels)} channels")
        if any(b < 1 for b in self.blocks):
            raise ValueError("every scale needs at least one block")
        if any(c < 1 for c in self.channels):
            raise ValueError("channel counts must be positive")
        if any(a >= b for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"channels must be strictly increasing, got {self.channels}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.head_blocks_per_scale < 1:
            raise ValueError("head_blocks_per_scale must be >= 1")
        if self.merge_kernel not in (1, 3):
            raise ValueError("merge_kernel must be 1 or 3")

    def scales(self):
        return [ScaleSpec(i + 1, self.blocks[i], self.channels[i]) for i in range(NUM_SCALES)]


@dataclass
class FeaturePyramid:
    """Six maps, finest first; map s has shape [N, channels_s, H/2^(s-1), W/2^(s-1)]."""

    maps: list

    def __post_init__(self):
        if len(self.maps) != NUM_SCALES:
            raise ValueError(f"expected {NUM_SCALES} maps, got {len(self.maps)}")
        n, _, h, w = self.maps[0].shape
        for s, m in enumerate(self.maps):
            want = (h // 2**s, w // 2**s)
            if m.shape[0] != n or m.shape[2:] != want:
                raise ValueError(f"map {s + 1} has shape {m.shape}, expected spatial {want}")


@dataclass
class BackboneModel:
    spec: NetworkSpec
    stem_conv: "ConvParams"
    stem_bn: "BatchNormParams"
    stages: list  # per scale: list of ResidualBlockParams

    def named_params(self):
        yield from self.stem_conv.named_params("stem.conv")
        yield from self.stem_bn.named_params("stem.bn")
        for s, blocks in enumerate(self.stages):
            for b, blk in enumerate(blocks):
                yield from blk.named_params(f"scale{s + 1}.block{b}")

    def named_buffers(self):
        yield from self.stem_bn.named_buffers("stem.bn")
        for s, blocks in enumerate(self.stages):
            for b, blk in enumerate(blocks):
                yield from blk.named_buffers(f"scale{s + 1}.block{b}")

    def bn_params(self):
        yield self.stem_bn
        for blocks in self.stages:
            for blk in blocks:
                yield blk.bn1
                yield blk.bn2

    def set_mode(self, mode: str):
        for bn in self.bn_params():
            bn.mode = mode


def build_backbone(spec: NetworkSpec, seed: int, dtype=np.float32) -> BackboneModel:
    """Deterministic He-normal initialization of the six-stage backbone."""
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    stem_conv = make_conv(3, spec.channels[0], 3, rng, stride=1, dtype=dtype)
    stem_bn = make_bn(spec.channels[0], dtype=dtype)
    stages = []
    c_in = spec.channels[0]
    for s in range(NUM_SCALES):
        c_out = spec.channels[s]
        blocks = []
        for b in range(spec.blocks[s]):
            stride = 2 if (s > 0 and b == 0) else 1  # scales 2-6 downsample once
            blocks.append(make_residual_block(c_in, c_out, rng, stride=stride, dtype=dtype))
            c_in = c_out
        stages.append(blocks)
    return BackboneModel(spec=spec, stem_conv=stem_conv, stem_bn=stem_bn, stages=stages)


def check_input_size(x: Tensor):
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected [N,3,H,W] input, got {x.shape}")
    _, _, h, w = x.shape
    if h % DIVISOR or w % DIVISOR:
        raise ValueError(f"input sides must be divisible by {DIVISOR}, got {h}x{w}")


def backbone_forward(model: BackboneModel, x: Tensor) -> FeaturePyramid:
    """Run the six stages; returns the per-scale feature maps, finest first."""
    check_input_size(x)
    out = relu(batch_norm(conv2d(x, model.stem_conv), model.stem_bn))
    maps = []
    for blocks in model.stages:
        for blk in blocks:
            out = residual_block(out, blk)
        maps.append(out)
    return FeaturePyramid(maps)


@dataclass
class ClassifierHead:
    weight: Tensor  # [K, C6]
    bias: Tensor  # [K]

    def named_params(self):
        yield "head.weight", self.weight
        yield "head.bias", self.bias


def make_classifier_head(spec: NetworkSpec, num_classes: int, seed: int, dtype=np.float32) -> ClassifierHead:
    rng = np.random.Generator(np.random.PCG64(seed))
    w, b = make_linear(spec.channels[-1], num_classes, rng, dtype=dtype)
    return ClassifierHead(w, b)


@dataclass
class ClassificationModel:
    """Backbone plus pooled linear head, for the pretraining workflow."""

    spec: NetworkSpec
    backbone: BackboneModel
    head: ClassifierHead

    def named_params(self):
        for name, t in self.backbone.named_params():
            yield "backbone." + name, t
        yield from self.head.named_params()

    def named_buffers(self):
        for name, a in self.backbone.named_buffers():
            yield "backbone." + name, a

    def parameters(self):
        return [t for _, t in self.named_params()]

    def set_mode(self, mode: str):
        self.backbone.set_mode(mode)

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None


def build_classification_model(spec: NetworkSpec, seed: int, dtype=np.float32) -> ClassificationModel:
    backbone = build_backbone(spec, seed, dtype=dtype)
    head = make_classifier_head(spec, spec.num_classes, seed=_head_seed(seed), dtype=dtype)
    return ClassificationModel(spec=spec, backbone=backbone, head=head)


def _head_seed(seed: int) -> int:
    return int(np.random.SeedSequence([seed, 2]).generate_state(1)[0])


def classify_forward(model: BackboneModel, head: ClassifierHead, x: Tensor) -> Tensor:
    """Logits from the coarsest map: global average pool then linear."""
    pyramid = backbone_forward(model, x)
    pooled = global_avg_pool(pyramid.maps[-1])
    return linear(pooled, head.weight, head.bias)


def param_count(model) -> int:
    """Number of trainable scalars (running stats excluded)."""
    return sum(int(np.prod(t.shape)) for _, t in model.named_params())
