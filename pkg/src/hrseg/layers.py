"""Neural building blocks: conv, batch norm, relu, bilinear resize, linear,
pooling, channel concat, residual block, softmax, and masked cross-entropy.

Every op here is a recorded autodiff node with a hand-written backward pass;
tests verify each one against central differences in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hrseg.tensor import Tensor, add, make_op, report_kink_pattern

# interpolation matrices keyed by (src, dst, dtype); shared across calls
INTERP_CACHE: dict = {}


# --- parameter containers ------------------------------------------------------


@dataclass
class ConvParams:
    weight: Tensor  # [C_out, C_in, k, k]
    bias: Tensor | None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ValueError(f"conv weight must be [C_out,C_in,k,k], got {self.weight.shape}")
        k = self.weight.shape[2]
        if k % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {k}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    def named_params(self, prefix):
        yield prefix + ".weight", self.weight
        if self.bias is not None:
            yield prefix + ".bias", self.bias

    def named_buffers(self, prefix):
        return iter(())


@dataclass
class BatchNormParams:
    gamma: Tensor  # [C]
    beta: Tensor  # [C]
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "train"  # "train" | "eval"

    def __post_init__(self):
        if self.epsilon <= 0 or not (0.0 < self.momentum < 1.0):
            raise ValueError("need epsilon > 0 and momentum in (0,1)")
        if np.any(self.running_var < 0):
            raise ValueError("running_var entries must be >= 0")

    def named_params(self, prefix):
        yield prefix + ".gamma", self.gamma
        yield prefix + ".beta", self.beta

    def named_buffers(self, prefix):
        yield prefix + ".running_mean", self.running_mean
        yield prefix + ".running_var", self.running_var


@dataclass
class ResidualBlockParams:
    conv1: ConvParams  # 3x3, stride 1 or 2
    bn1: BatchNormParams
    conv2: ConvParams  # 3x3, stride 1
    bn2: BatchNormParams
    projection: ConvParams | None = None  # 1x1, same stride as conv1

    def named_params(self, prefix):
        yield from self.conv1.named_params(prefix + ".conv1")
        yield from self.bn1.named_params(prefix + ".bn1")
        yield from self.conv2.named_params(prefix + ".conv2")
        yield from self.bn2.named_params(prefix + ".bn2")
        if self.projection is not None:
            yield from self.projection.named_params(prefix + ".proj")

    def named_buffers(self, prefix):
        yield from self.bn1.named_buffers(prefix + ".bn1")
        yield from self.bn2.named_buffers(prefix + ".bn2")


# --- initialization ------------------------------------------------------------


def make_conv(c_in, c_out, k, rng, stride=1, padding=None, bias=False, dtype=np.float32):
    """He-normal conv weights (std = sqrt(2/fan_in)); padding defaults to k//2."""
    std = float(np.sqrt(2.0 / (c_in * k * k)))
    w = Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(dtype), requires_grad=True)
    b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None
    return ConvParams(w, b, stride=stride, padding=k // 2 if padding is None else padding)


def make_bn(c, dtype=np.float32, momentum=0.1, epsilon=1e-5):
    return BatchNormParams(
        gamma=Tensor(np.ones(c, dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros(c, dtype=dtype), requires_grad=True),
        running_mean=np.zeros(c, dtype=dtype),
        running_var=np.ones(c, dtype=dtype),
        momentum=momentum,
        epsilon=epsilon,
    )


def make_linear(d_in, d_out, rng, dtype=np.float32):
    """Uniform(-1/sqrt(D), 1/sqrt(D)) weight and bias."""
    bound = 1.0 / np.sqrt(d_in)
    w = Tensor(rng.uniform(-bound, bound, size=(d_out, d_in)).astype(dtype), requires_grad=True)
    b = Tensor(rng.uniform(-bound, bound, size=d_out).astype(dtype), requires_grad=True)
    return w, b


def make_residual_block(c_in, c_out, rng, stride=1, dtype=np.float32):
    """Two-conv basic block; 1x1 projection added when the shapes change."""
    block = ResidualBlockParams(
        conv1=make_conv(c_in, c_out, 3, rng, stride=stride, dtype=dtype),
        bn1=make_bn(c_out, dtype=dtype),
        conv2=make_conv(c_out, c_out, 3, rng, stride=1, dtype=dtype),
        bn2=make_bn(c_out, dtype=dtype),
    )
    if stride != 1 or c_in != c_out:
        block.projection = make_conv(c_in, c_out, 1, rng, stride=stride, padding=0, dtype=dtype)
    return block


# --- convolution ----------------------------------------------------------------


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation with the usual floor((H+2p-k)/s)+1 output size."""
    n, c_in, h, w = x.shape
    c_out, c_in_w, k, _ = p.weight.shape
    if c_in != c_in_w:
        raise ValueError(f"conv expects {c_in_w} input channels, got {c_in}")
    stride, pad = p.stride, p.padding
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ValueError(f"kernel {k} larger than padded input ({h}+2*{pad}, {w}+2*{pad})")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1

    if pad:
        xp = np.zeros((n, c_in, h + 2 * pad, w + 2 * pad), dtype=x.data.dtype)
        xp[:, :, pad : pad + h, pad : pad + w] = x.data
    else:
        xp = x.data
    # columns laid out (C_in*k*k, N*Ho*Wo) so both matmuls run on views
    cols = np.empty((c_in, k, k, n, ho, wo), dtype=x.data.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, ki, kj] = xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride].transpose(1, 0, 2, 3)
    mat = cols.reshape(c_in * k * k, n * ho * wo)
    w_mat = p.weight.data.reshape(c_out, -1)
    out = np.ascontiguousarray((w_mat @ mat).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3))
    if p.bias is not None:
        out += p.bias.data.reshape(1, -1, 1, 1)

    def backward_fn(g):
        g_mat = g.transpose(1, 0, 2, 3).reshape(c_out, n * ho * wo)
        d_w = (g_mat @ mat.T).reshape(p.weight.shape)
        d_b = g.sum(axis=(0, 2, 3)) if p.bias is not None else None
        d_cols = (w_mat.T @ g_mat).reshape(c_in, k, k, n, ho, wo)
        hp, wp = h + 2 * pad, w + 2 * pad
        d_xp = np.zeros((n, c_in, hp, wp), dtype=g.dtype)
        for ki in range(k):
            for kj in range(k):
                d_xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += d_cols[:, ki, kj].transpose(1, 0, 2, 3)
        d_x = d_xp[:, :, pad : pad + h, pad : pad + w] if pad else d_xp
        if p.bias is not None:
            return [d_x, d_w, d_b]
        return [d_x, d_w]

    inputs = [x, p.weight] + ([p.bias] if p.bias is not None else [])
    return make_op("conv2d", inputs, out, backward_fn)


# --- batch normalization ---------------------------------------------------------


def batch_norm(x: Tensor, p: BatchNormParams) -> Tensor:
    """Per-channel normalization over (N,H,W); batch stats in train mode."""
    n, c, h, w = x.shape
    if c != p.gamma.shape[0]:
        raise ValueError(f"batch_norm expects {p.gamma.shape[0]} channels, got {c}")
    gamma = p.gamma.data.reshape(1, c, 1, 1)

    if p.mode == "train":
        m = n * h * w
        if m < 2:
            raise ValueError("train-mode batch_norm needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        p.running_mean[:] = (1.0 - p.momentum) * p.running_mean + p.momentum * mean
        p.running_var[:] = (1.0 - p.momentum) * p.running_var + p.momentum * var
        inv_std = 1.0 / np.sqrt(var + p.epsilon)
        xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = gamma * xhat + p.beta.data.reshape(1, c, 1, 1)

        def backward_fn(g):
            d_beta = g.sum(axis=(0, 2, 3))
            d_gamma = (g * xhat).sum(axis=(0, 2, 3))
            d_xhat = g * gamma
            s1 = d_xhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (d_xhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            d_x = inv_std.reshape(1, c, 1, 1) * (d_xhat - s1 / m - xhat * s2 / m)
            return [d_x, d_gamma, d_beta]

    elif p.mode == "eval":
        inv_std = (1.0 / np.sqrt(p.running_var + p.epsilon)).reshape(1, c, 1, 1)
        xhat = (x.data - p.running_mean.reshape(1, c, 1, 1)) * inv_std
        out = gamma * xhat + p.beta.data.reshape(1, c, 1, 1)

        def backward_fn(g):
            d_beta = g.sum(axis=(0, 2, 3))
            d_gamma = (g * xhat).sum(axis=(0, 2, 3))
            return [g * gamma * inv_std, d_gamma, d_beta]

    else:
        raise ValueError(f"unknown batch_norm mode {p.mode!r}")

    return make_op("batch_norm", [x, p.gamma, p.beta], np.ascontiguousarray(out), backward_fn)


# --- simple activations and reshapes ----------------------------------------------


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    mask = x.data > 0
    report_kink_pattern(mask)
    out = np.where(mask, x.data, 0)

    def backward_fn(g):
        return [g * mask]

    return make_op("relu", [x], out, backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack along the channel axis: channels of ``a`` first."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat needs matching batch/spatial dims, got {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward_fn(g):
        return [g[:, :ca], g[:, ca:]]

    return make_op("concat", [a, b], out, backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: [N,C,H,W] -> [N,C]."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward_fn(g):
        return [np.broadcast_to(g.reshape(n, c, 1, 1) / (h * w), x.shape)]

    return make_op("global_avg_pool", [x], out, backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = x @ weight^T + bias for [N,D] inputs."""
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear expects inner dim {weight.shape[1]}, got {x.shape[1]}")
    out = x.data @ weight.data.T + bias.data

    def backward_fn(g):
        return [g @ weight.data, g.T @ x.data, g.sum(axis=0)]

    return make_op("linear", [x, weight, bias], out, backward_fn)


# --- bilinear interpolation --------------------------------------------------------


def interp_matrix(src: int, dst: int, dtype) -> np.ndarray:
    """[dst, src] row-interpolation matrix, half-pixel-center convention."""
    key = (src, dst, np.dtype(dtype).str)
    cached = INTERP_CACHE.get(key)
    if cached is not None:
        return cached
    m = np.zeros((dst, src), dtype=dtype)
    coords = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    coords = np.clip(coords, 0.0, src - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    frac = coords - lo
    for i in range(dst):
        m[i, lo[i]] += 1.0 - frac[i]
        m[i, hi[i]] += frac[i]
    INTERP_CACHE[key] = m
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize [N,C,H,W] to [N,C,out_h,out_w] with half-pixel-center bilinear.

    Source coordinate of output pixel (i,j) is ((i+0.5)*H/out_h - 0.5,
    (j+0.5)*W/out_w - 0.5), clamped to the valid range. Separable, so the
    resize is two small matrix products and the backward pass is their
    transpose.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    ry = interp_matrix(h, out_h, x.data.dtype)
    rx = interp_matrix(w, out_w, x.data.dtype)
    flat = x.data.reshape(n * c, h, w)
    out = (ry @ flat @ rx.T).reshape(n, c, out_h, out_w)

    def backward_fn(g):
        g_flat = g.reshape(n * c, out_h, out_w)
        return [(ry.T @ g_flat @ rx).reshape(x.shape)]

    return make_op("bilinear_resize", [x], np.ascontiguousarray(out), backward_fn)


# --- residual block -----------------------------------------------------------------


def residual_block(x: Tensor, p: ResidualBlockParams) -> Tensor:
    """relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x))."""
    main = relu(batch_norm(conv2d(x, p.conv1), p.bn1))
    main = batch_norm(conv2d(main, p.conv2), p.bn2)
    shortcut = conv2d(x, p.projection) if p.projection is not None else x
    if shortcut.shape != main.shape:
        raise ValueError(
            f"residual shortcut shape {shortcut.shape} != main path {main.shape}; "
            "projection missing or inconsistent"
        )
    return relu(add(main, shortcut))


# --- classification/segmentation losses ----------------------------------------------


def _as_labels(labels) -> np.ndarray:
    arr = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    return arr.astype(np.int64, copy=False)


def softmax_channels(logits: Tensor) -> Tensor:
    """Per-pixel channel softmax of [N,C,H,W] logits (max-subtracted)."""
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        dot = (g * probs).sum(axis=1, keepdims=True)
        return [probs * (g - dot)]

    return make_op("softmax", [logits], probs, backward_fn)


def cross_entropy_ignore(logits: Tensor, labels, ignore_value: int = 255) -> Tensor:
    """Mean of -log softmax(logits)[label] over pixels whose label is not ignored.

    Accepts [N,C,H,W] logits with [N,H,W] labels, or [N,K] logits with [N]
    class indices. Raises when every pixel is ignored.
    """
    lab = _as_labels(labels)
    data = logits.data
    squeeze = False
    if data.ndim == 2:
        data = data.reshape(*data.shape, 1, 1)
        lab = lab.reshape(-1, 1, 1)
        squeeze = True
    n, c, h, w = data.shape
    if lab.shape != (n, h, w):
        raise ValueError(f"labels shape {lab.shape} does not match logits {data.shape}")
    valid = lab != ignore_value
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cross_entropy_ignore: every pixel is ignored")
    if lab[valid].min() < 0 or lab[valid].max() >= c:
        raise ValueError(f"labels must lie in [0,{c}) or equal {ignore_value}")

    z = data - data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    ni, hi, wi = np.nonzero(valid)
    picked = lab[ni, hi, wi]
    loss = -logp[ni, picked, hi, wi].sum() / n_valid
    out = np.asarray(loss, dtype=data.dtype)

    def backward_fn(g):
        d = np.exp(logp)  # softmax probabilities
        d[ni, picked, hi, wi] -= 1.0
        d *= valid[:, None, :, :]
        d *= float(g) / n_valid
        if squeeze:
            d = d.reshape(n, c)
        return [d]

    return make_op("cross_entropy", [logits], out, backward_fn)
