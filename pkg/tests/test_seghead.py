import numpy as np
import pytest

import hrseg.seghead as seghead
from hrseg.backbone import NetworkSpec, backbone_forward
from hrseg.seghead import (
    SegOutput,
    bottom_up_propagate,
    build_seg_model,
    head_forward,
    make_merge,
    merge,
    predict,
    seg_forward,
)
from hrseg.tensor import Tensor, backward, grad_check, sum_all

TINY = NetworkSpec(channels=(8, 12, 16, 24, 32, 48), num_classes=4, head_blocks_per_scale=1)
GRADCHECK_SPEC = NetworkSpec(channels=(4, 6, 8, 10, 12, 14), num_classes=3, head_blocks_per_scale=1)


def rand(shape, seed=0, lo=0.0, hi=1.0, dtype=np.float32):
    return np.random.default_rng(seed).uniform(lo, hi, shape).astype(dtype)


def test_merge_table1_shapes():
    rng = np.random.default_rng(0)
    p = make_merge(450, 320, 320, 3, rng, with_bn=True)
    low = Tensor(rand((1, 450, 2, 2), seed=1))
    high = Tensor(rand((1, 320, 4, 4), seed=2))
    assert merge(low, high, p).shape == (1, 320, 4, 4)


def test_merge_zeroed_low_weights_ignore_low():
    rng = np.random.default_rng(1)
    p = make_merge(6, 4, 4, 3, rng, with_bn=True)
    p.conv.weight.data[:, :6] = 0.0  # low channels come first in the concat
    high = Tensor(rand((1, 4, 8, 8), seed=3))
    out_zero = merge(Tensor(np.zeros((1, 6, 4, 4), dtype=np.float32)), high, p).data
    p.bn.running_mean[:] = 0.0
    p.bn.running_var[:] = 1.0
    out_rand = merge(Tensor(rand((1, 6, 4, 4), seed=4)), high, p).data
    assert np.allclose(out_zero, out_rand, atol=1e-6)


def test_merge_batch_mismatch():
    rng = np.random.default_rng(2)
    p = make_merge(2, 3, 3, 3, rng, with_bn=True)
    with pytest.raises(ValueError, match="batch"):
        merge(Tensor(np.zeros((1, 2, 2, 2), dtype=np.float32)), Tensor(np.zeros((2, 3, 4, 4), dtype=np.float32)), p)


def test_merge_grad_check():
    rng = np.random.default_rng(3)
    p = make_merge(2, 3, 3, 3, rng, with_bn=True, dtype=np.float64)
    high = Tensor(rand((1, 3, 4, 4), seed=5, dtype=np.float64))
    low = Tensor(rand((1, 2, 2, 2), seed=6))
    report = grad_check(
        lambda t: sum_all(merge(t, Tensor(high.data), p)), low, tol=1e-3, min_magnitude=1e-5
    )
    assert report.passed, str(report)


def test_bottom_up_shapes_default_channels():
    rng = np.random.default_rng(4)
    spec = NetworkSpec()
    merges = [
        make_merge(spec.channels[s], spec.channels[s - 1], spec.channels[s - 1], 3, rng, with_bn=True)
        for s in range(5, 0, -1)
    ]
    maps = [
        Tensor(rand((1, spec.channels[s], 64 // 2**s, 64 // 2**s), seed=s))
        for s in range(6)
    ]
    outs = bottom_up_propagate(maps, merges)
    assert [tuple(o.shape) for o in outs] == [
        (1, 320, 4, 4),
        (1, 200, 8, 8),
        (1, 125, 16, 16),
        (1, 75, 32, 32),
        (1, 50, 64, 64),
    ]


def test_bottom_up_degenerate_two_maps(monkeypatch):
    calls = []
    real_merge = seghead.merge

    def counting_merge(low, high, p):
        calls.append((id(low), id(high)))
        return real_merge(low, high, p)

    monkeypatch.setattr(seghead, "merge", counting_merge)
    rng = np.random.default_rng(5)
    merges = [make_merge(3, 2, 2, 3, rng, with_bn=True)]
    maps = [Tensor(rand((1, 2, 8, 8), seed=1)), Tensor(rand((1, 3, 4, 4), seed=2))]
    bottom_up_propagate(maps, merges)
    assert len(calls) == 1


def test_bottom_up_chain_order(monkeypatch):
    seen = []
    real_merge = seghead.merge

    def tracing_merge(low, high, p):
        out = real_merge(low, high, p)
        seen.append((id(low), id(high), id(out)))
        return out

    monkeypatch.setattr(seghead, "merge", tracing_merge)
    rng = np.random.default_rng(6)
    chans = (2, 3, 4, 5)
    merges = [make_merge(chans[s], chans[s - 1], chans[s - 1], 3, rng, with_bn=True) for s in (3, 2, 1)]
    maps = [Tensor(rand((1, chans[s], 32 // 2**s, 32 // 2**s), seed=s)) for s in range(4)]
    bottom_up_propagate(maps, merges)
    assert seen[0][0] == id(maps[-1])  # first merge consumes the coarsest raw map
    for prev, cur in zip(seen, seen[1:]):
        assert cur[0] == prev[2]  # later merges consume the previous output
    assert [s[1] for s in seen] == [id(m) for m in reversed(maps[:-1])]


def test_bottom_up_rejects_short_input():
    with pytest.raises(ValueError):
        bottom_up_propagate([Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32))], [])


def test_seg_forward_shapes():
    model = build_seg_model(TINY, seed=0)
    out = seg_forward(model, Tensor(rand((1, 3, 64, 64), seed=7)))
    assert out.final_logits.shape == (1, 4, 64, 64)
    assert [tuple(s.shape) for s in out.scale_logits] == [
        (1, 4, 2, 2),
        (1, 4, 4, 4),
        (1, 4, 8, 8),
        (1, 4, 16, 16),
        (1, 4, 32, 32),
        (1, 4, 64, 64),
    ]


def test_resolution_identity_sweep():
    model = build_seg_model(TINY, seed=0)
    model.set_mode("eval")
    for h, w in [(32, 32), (32, 64), (96, 32)]:
        out = seg_forward(model, Tensor(rand((1, 3, h, w), seed=h + w)))
        assert out.final_logits.shape == (1, 4, h, w)


def test_stage2_merges_preserve_class_channels():
    model = build_seg_model(TINY, seed=0)
    for m in model.head.stage2_merges:
        assert m.out_channels == TINY.num_classes
        assert m.conv.weight.shape[0] == TINY.num_classes
        assert m.bn is None  # logit merges stay linear


def test_backward_reaches_every_parameter_group():
    from hrseg.layers import cross_entropy_ignore

    model = build_seg_model(TINY, seed=1)
    x = Tensor(rand((2, 3, 32, 32), seed=8))
    labels = np.random.default_rng(9).integers(0, 4, size=(2, 32, 32)).astype(np.uint8)
    out = seg_forward(model, x)
    backward(cross_entropy_ignore(out.final_logits, labels))
    group_norm = {}
    for name, t in model.named_params():
        group = ".".join(name.split(".")[:2])
        g = 0.0 if t.grad is None else float(np.abs(t.grad).sum())
        group_norm[group] = group_norm.get(group, 0.0) + g
    dead = sorted(g for g, v in group_norm.items() if v == 0.0)
    assert not dead, f"parameter groups with zero gradient: {dead}"
    # stem, six backbone scales, both fusion stages, and the refiners all live
    assert {"backbone.stem", "backbone.scale1", "backbone.scale6", "head.fuse1", "head.fuse2", "head.refine"} <= set(group_norm)


def test_coarse_context_sensitivity():
    model = build_seg_model(TINY, seed=0)
    model.set_mode("eval")
    x = Tensor(rand((1, 3, 32, 32), seed=10))
    pyramid = backbone_forward(model.backbone, x)
    base = head_forward(model, pyramid.maps).final_logits.data
    bumped = [m for m in pyramid.maps]
    bumped[5] = Tensor(pyramid.maps[5].data + 0.5)
    shifted = head_forward(model, bumped).final_logits.data
    assert np.linalg.norm(shifted - base) > 0


def test_predict_argmax_and_ties():
    model = build_seg_model(TINY, seed=0)
    x = Tensor(rand((1, 3, 32, 32), seed=11))
    model.set_mode("eval")
    out = seg_forward(model, x)
    pred = predict(model, x)
    assert pred.shape == (1, 32, 32)
    assert np.array_equal(pred, np.argmax(out.final_logits.data, axis=1))
    # tie-break: identical logits over channels -> class 0 everywhere
    tied = np.zeros((1, 3, 2, 2), dtype=np.float32)
    assert np.all(np.argmax(tied, axis=1) == 0)


def test_full_network_grad_check_tiny():
    model = build_seg_model(GRADCHECK_SPEC, seed=2, dtype=np.float64)
    # one train-mode pass moves the running stats off their init, then eval
    # mode makes batch norm a fixed affine map (well-defined even on the 1x1
    # coarsest map this input produces)
    seg_forward(model, Tensor(rand((1, 3, 64, 64), seed=14, dtype=np.float64)))
    model.set_mode("eval")
    x = Tensor(rand((1, 3, 32, 32), seed=12, lo=0.1, hi=1.0, dtype=np.float64))
    weights = Tensor(np.random.default_rng(13).uniform(-1, 1, (1, 3, 32, 32)).astype(np.float64))

    def fn(t):
        return sum_all(seg_forward(model, t).final_logits * weights)

    report = grad_check(fn, x, tol=3e-3, min_magnitude=1e-5, max_probes=60, probe_seed=3, kink_filter=True)
    assert report.passed, str(report)
