"""Segmentation head: merge modules, bottom-up propagation, per-scale refinement.

Stage 1 walks the feature pyramid from coarse to fine, at each step upsampling
the running map, concatenating the next finer feature map, and condensing the
channels back to the finer map's width. Each of the six resulting maps (the
raw coarsest map plus the five fused ones) is refined by residual blocks and
projected to class logits; stage 2 repeats the same coarse-to-fine fusion over
the logit maps, ending at full input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hrseg.backbone import (
    BackboneModel,
    NetworkSpec,
    backbone_forward,
    build_backbone,
    make_classifier_head,
)
from hrseg.layers import (
    ConvParams,
    batch_norm,
    bilinear_resize,
    concat_channels,
    conv2d,
    make_bn,
    make_conv,
    make_residual_block,
    relu,
    residual_block,
    softmax_channels,
)
from hrseg.tensor import Tensor, no_grad


@dataclass
class MergeModuleParams:
    """Upsample low, concat with high, condense channels with one conv.

    ``bn`` is present for feature-space merges (conv+BN+ReLU) and None for
    logit-space merges, which must stay linear.
    """

    conv: ConvParams
    bn: "BatchNormParams | None"
    out_channels: int

    def __post_init__(self):
        if self.conv.weight.shape[0] != self.out_channels:
            raise ValueError("merge conv output width disagrees with out_channels")

    def named_params(self, prefix):
        yield from self.conv.named_params(prefix + ".conv")
        if self.bn is not None:
            yield from self.bn.named_params(prefix + ".bn")

    def named_buffers(self, prefix):
        if self.bn is not None:
            yield from self.bn.named_buffers(prefix + ".bn")


@dataclass
class RefineParams:
    """Per-scale stack of residual blocks plus a 1x1 conv to class logits."""

    blocks: list
    classifier: ConvParams

    def named_params(self, prefix):
        for i, blk in enumerate(self.blocks):
            yield from blk.named_params(f"{prefix}.block{i}")
        yield from self.classifier.named_params(prefix + ".cls")

    def named_buffers(self, prefix):
        for i, blk in enumerate(self.blocks):
            yield from blk.named_buffers(f"{prefix}.block{i}")


@dataclass
class SegHeadParams:
    stage1_merges: list  # 5 feature merges, coarsest pair first
    refines: list  # 6 refine stacks, coarsest scale first
    stage2_merges: list  # 5 logit merges, coarsest pair first

    def named_params(self):
        for i, m in enumerate(self.stage1_merges):
            yield from m.named_params(f"fuse1.m{i}")
        for i, r in enumerate(self.refines):
            yield from r.named_params(f"refine.s{6 - i}")
        for i, m in enumerate(self.stage2_merges):
            yield from m.named_params(f"fuse2.m{i}")

    def named_buffers(self):
        for i, m in enumerate(self.stage1_merges):
            yield from m.named_buffers(f"fuse1.m{i}")
        for i, r in enumerate(self.refines):
            yield from r.named_buffers(f"refine.s{6 - i}")
        for i, m in enumerate(self.stage2_merges):
            yield from m.named_buffers(f"fuse2.m{i}")

    def bn_params(self):
        for m in self.stage1_merges:
            if m.bn is not None:
                yield m.bn
        for r in self.refines:
            for blk in r.blocks:
                yield blk.bn1
                yield blk.bn2


@dataclass
class SegOutput:
    final_logits: Tensor  # [N,K,H,W]
    scale_logits: list  # 6 logit maps, coarsest first


def make_merge(c_low, c_high, c_out, kernel, rng, with_bn, dtype=np.float32):
    conv = make_conv(c_low + c_high, c_out, kernel, rng, stride=1, bias=not with_bn, dtype=dtype)
    bn = make_bn(c_out, dtype=dtype) if with_bn else None
    return MergeModuleParams(conv=conv, bn=bn, out_channels=c_out)


def make_seg_head(spec: NetworkSpec, rng, dtype=np.float32) -> SegHeadParams:
    ch = spec.channels
    k = spec.num_classes
    stage1 = []
    for s in range(5, 0, -1):  # merge producing the scale-s map (1-based)
        stage1.append(make_merge(ch[s], ch[s - 1], ch[s - 1], spec.merge_kernel, rng, with_bn=True, dtype=dtype))
    refines = []
    for s in range(6, 0, -1):  # coarsest first, matching seg_forward's order
        c = ch[s - 1]
        blocks = [make_residual_block(c, c, rng, stride=1, dtype=dtype) for _ in range(spec.head_blocks_per_scale)]
        classifier = make_conv(c, k, 1, rng, stride=1, padding=0, bias=True, dtype=dtype)
        refines.append(RefineParams(blocks=blocks, classifier=classifier))
    stage2 = [
        make_merge(k, k, k, spec.merge_kernel, rng, with_bn=False, dtype=dtype) for _ in range(5)
    ]
    return SegHeadParams(stage1_merges=stage1, refines=refines, stage2_merges=stage2)


@dataclass
class SegModel:
    spec: NetworkSpec
    backbone: BackboneModel
    head: SegHeadParams

    def named_params(self):
        for name, t in self.backbone.named_params():
            yield "backbone." + name, t
        for name, t in self.head.named_params():
            yield "head." + name, t

    def named_buffers(self):
        for name, a in self.backbone.named_buffers():
            yield "backbone." + name, a
        for name, a in self.head.named_buffers():
            yield "head." + name, a

    def parameters(self):
        return [t for _, t in self.named_params()]

    def set_mode(self, mode: str):
        self.backbone.set_mode(mode)
        for bn in self.head.bn_params():
            bn.mode = mode

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None


def build_seg_model(spec: NetworkSpec, seed: int, dtype=np.float32) -> SegModel:
    """Backbone and head initialized from one seeded stream."""
    backbone = build_backbone(spec, seed, dtype=dtype)
    head_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))
    head = make_seg_head(spec, head_rng, dtype=dtype)
    return SegModel(spec=spec, backbone=backbone, head=head)


def merge(low: Tensor, high: Tensor, p: MergeModuleParams) -> Tensor:
    """Resize ``low`` to ``high``'s size, concat, condense channels."""
    if low.shape[0] != high.shape[0]:
        raise ValueError(f"merge batch mismatch: {low.shape[0]} vs {high.shape[0]}")
    resized = bilinear_resize(low, high.shape[2], high.shape[3])
    fused = conv2d(concat_channels(resized, high), p.conv)
    if p.bn is not None:
        fused = relu(batch_norm(fused, p.bn))
    return fused


def bottom_up_propagate(maps: list, merges: list) -> list:
    """Fold the pyramid coarse-to-fine through successive merges.

    ``maps`` is finest-first (pyramid order). The first merge fuses the two
    coarsest maps; each later merge fuses the running output with the next
    finer map. Returns the merged maps in production order (coarsest first);
    the last one has the finest input resolution.
    """
    if len(maps) < 2:
        raise ValueError("bottom-up propagation needs at least two maps")
    if len(merges) != len(maps) - 1:
        raise ValueError(f"{len(maps)} maps need {len(maps) - 1} merges, got {len(merges)}")
    out = maps[-1]
    produced = []
    for p, high in zip(merges, reversed(maps[:-1])):
        out = merge(out, high, p)
        produced.append(out)
    return produced


def head_forward(model: SegModel, pyramid_maps: list) -> SegOutput:
    """Head-only pipeline over six feature maps (finest first)."""
    merged = bottom_up_propagate(pyramid_maps, model.head.stage1_merges)
    feats = [pyramid_maps[-1]] + merged  # scales 6,5,4,3,2,1
    scale_logits = []
    for refine, feat in zip(model.head.refines, feats):
        t = feat
        for blk in refine.blocks:
            t = residual_block(t, blk)
        scale_logits.append(conv2d(t, refine.classifier))
    fused_logits = bottom_up_propagate(list(reversed(scale_logits)), model.head.stage2_merges)
    return SegOutput(final_logits=fused_logits[-1], scale_logits=scale_logits)


def seg_forward(model: SegModel, x: Tensor) -> SegOutput:
    """Full pipeline: backbone, stage-1 fusion, refinement, stage-2 fusion."""
    pyramid = backbone_forward(model.backbone, x)
    return head_forward(model, pyramid.maps)


def predict(model: SegModel, x: Tensor) -> np.ndarray:
    """Per-pixel argmax class map [N,H,W]; ties go to the lower class index."""
    with no_grad():
        out = seg_forward(model, x)
    return np.argmax(out.final_logits.data, axis=1).astype(np.uint8)


def predict_probs(model: SegModel, x: Tensor) -> np.ndarray:
    """Per-pixel class probabilities [N,K,H,W] (inference only)."""
    with no_grad():
        out = seg_forward(model, x)
        probs = softmax_channels(out.final_logits)
    return probs.data
