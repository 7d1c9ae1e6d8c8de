import numpy as np
import pytest

from hrseg.backbone import (
    DEFAULT_BLOCKS,
    DEFAULT_CHANNELS,
    NetworkSpec,
    backbone_forward,
    build_backbone,
    classify_forward,
    make_classifier_head,
    param_count,
)
from hrseg.layers import make_bn, make_conv
from hrseg.tensor import Tensor, backward, sum_all

TINY = dict(channels=(8, 12, 16, 24, 32, 48), num_classes=4)

# Trainable scalars in the default backbone, frozen from the closed-form
# count below the first time it was computed.
DEFAULT_BACKBONE_PARAMS = 24_725_920


def closed_form_backbone_count(blocks, channels):
    """Independent per-layer count: conv C_out*C_in*k^2, BN 2C, 1x1 projections."""

    def block_params(c_in, c_out, downsample):
        total = c_in * c_out * 9 + 2 * c_out  # conv1 + bn1
        total += c_out * c_out * 9 + 2 * c_out  # conv2 + bn2
        if downsample or c_in != c_out:
            total += c_in * c_out  # 1x1 projection
        return total

    total = 3 * channels[0] * 9 + 2 * channels[0]  # stem conv + bn
    c_in = channels[0]
    for s, (n_blocks, c_out) in enumerate(zip(blocks, channels)):
        for b in range(n_blocks):
            total += block_params(c_in, c_out, downsample=(s > 0 and b == 0))
            c_in = c_out
    return total


class _Single:
    def __init__(self, p):
        self.p = p

    def named_params(self):
        yield from self.p.named_params("p")


def test_param_count_single_conv_with_bias():
    rng = np.random.Generator(np.random.PCG64(0))
    conv = make_conv(3, 4, 1, rng, padding=0, bias=True)
    assert param_count(_Single(conv)) == 3 * 4 + 4


def test_param_count_single_bn():
    assert param_count(_Single(make_bn(5))) == 10


def test_default_backbone_param_count_frozen():
    model = build_backbone(NetworkSpec(), seed=0)
    expected = closed_form_backbone_count(DEFAULT_BLOCKS, DEFAULT_CHANNELS)
    assert expected == DEFAULT_BACKBONE_PARAMS
    assert param_count(model) == DEFAULT_BACKBONE_PARAMS


def test_build_deterministic():
    a = build_backbone(NetworkSpec(**TINY), seed=11)
    b = build_backbone(NetworkSpec(**TINY), seed=11)
    for (na, ta), (nb, tb) in zip(a.named_params(), b.named_params()):
        assert na == nb
        assert np.array_equal(ta.data, tb.data)
    c = build_backbone(NetworkSpec(**TINY), seed=12)
    assert not all(
        np.array_equal(ta.data, tc.data)
        for (_, ta), (_, tc) in zip(a.named_params(), c.named_params())
    )


def test_tiny_spec_runs_and_is_finite():
    model = build_backbone(NetworkSpec(**TINY), seed=0)
    x = Tensor(np.random.default_rng(0).uniform(0, 1, (1, 3, 64, 64)).astype(np.float32))
    pyramid = backbone_forward(model, x)
    for m in pyramid.maps:
        assert np.all(np.isfinite(m.data))


def test_default_pyramid_shapes_64():
    model = build_backbone(NetworkSpec(), seed=0)
    x = Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32))
    pyramid = backbone_forward(model, x)
    got = [tuple(m.shape) for m in pyramid.maps]
    assert got == [
        (1, 50, 64, 64),
        (1, 75, 32, 32),
        (1, 125, 16, 16),
        (1, 200, 8, 8),
        (1, 320, 4, 4),
        (1, 450, 2, 2),
    ]


def test_batch_dimension_preserved():
    model = build_backbone(NetworkSpec(**TINY), seed=0)
    x = Tensor(np.zeros((2, 3, 96, 64), dtype=np.float32))
    pyramid = backbone_forward(model, x)
    for s, m in enumerate(pyramid.maps):
        assert m.shape == (2, TINY["channels"][s], 96 // 2**s, 64 // 2**s)


def test_indivisible_input_rejected():
    model = build_backbone(NetworkSpec(**TINY), seed=0)
    with pytest.raises(ValueError, match="divisible"):
        backbone_forward(model, Tensor(np.zeros((1, 3, 50, 50), dtype=np.float32)))


def test_spec_rejects_nonmonotonic_channels():
    with pytest.raises(ValueError, match="increasing"):
        NetworkSpec(channels=(8, 8, 16, 24, 32, 48))


def test_spec_rejects_wrong_scale_count():
    with pytest.raises(ValueError):
        NetworkSpec(channels=(8, 12, 16), blocks=(1, 1, 1))


def test_pyramid_shape_law_sweep():
    model = build_backbone(NetworkSpec(**TINY), seed=0)
    model.set_mode("eval")  # train-mode BN is undefined on 1x1 maps at batch 1
    for h in (32, 64, 96, 128):
        for w in (32, 64):
            pyramid = backbone_forward(model, Tensor(np.zeros((1, 3, h, w), dtype=np.float32)))
            for s, m in enumerate(pyramid.maps):
                assert m.shape == (1, TINY["channels"][s], h // 2**s, w // 2**s)


def test_gradient_flows_to_stem():
    model = build_backbone(NetworkSpec(**TINY), seed=0)
    x = Tensor(np.random.default_rng(1).uniform(0, 1, (1, 3, 64, 64)).astype(np.float32))
    pyramid = backbone_forward(model, x)
    backward(sum_all(pyramid.maps[-1]))
    g = model.stem_conv.weight.grad
    assert g is not None and np.linalg.norm(g) > 0


def test_classify_forward_shape_and_determinism():
    spec = NetworkSpec(**TINY)
    x = Tensor(np.random.default_rng(2).uniform(0, 1, (4, 3, 32, 32)).astype(np.float32))
    outs = []
    for _ in range(2):
        model = build_backbone(spec, seed=3)
        head = make_classifier_head(spec, num_classes=10, seed=4)
        out = classify_forward(model, head, x)
        assert out.shape == (4, 10)
        outs.append(out.data)
    assert np.array_equal(outs[0], outs[1])
