"""Residual CNN for d x T feature matrices, with hand-written backpropagation.

Topology: conv3x3(16)-BN-ReLU, 2x2 max-pool (ceil mode), then four residual
layers of widths 16/32/64/128. Each layer is one downsampling block (stride-2
conv, 1x1 stride-2 projection on the skip path) followed by one identity
block. The final map is flattened into a 2-way dense layer with softmax.

Parameters live in a flat ``dict[str, ndarray]``; architecture is read
back from the tensor names and shapes. Activations are kept channels-last
(B, H, W, C) internally; the public input layout is (B, 1, d, T).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

WIDTHS = (16, 32, 64, 128)
N_FRAMES = 246
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
MIN_ROWS, MAX_ROWS = 13, 65


# ---------------------------------------------------------------- primitives


def conv_forward(x, w, b, stride=1, pad=1):
    """Cross-correlation, x: (B, H, W, C), w: (O, C, k, k) -> (B, Ho, Wo, O)."""
    bsz, h, wd, c = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    cols = np.empty((bsz, ho, wo, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :]
    cols = cols.reshape(-1, k * k * c)
    wmat = w.transpose(2, 3, 1, 0).reshape(k * k * c, o)
    out = (cols @ wmat + b).reshape(bsz, ho, wo, o)
    return out, (x.shape, cols, wmat, w.shape, stride, pad)


def conv_backward(dout, cache, need_dx: bool = True):
    xshape, cols, wmat, wshape, stride, pad = cache
    bsz, h, wd, c = xshape
    o, _, k, _ = wshape
    _, ho, wo, _ = dout.shape
    d2 = dout.reshape(-1, o)
    dw = (cols.T @ d2).reshape(k, k, c, o).transpose(3, 2, 0, 1)
    db = _channel_sum(d2)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ wmat.T).reshape(bsz, ho, wo, k, k, c)
    dxp = np.zeros((bsz, h + 2 * pad, wd + 2 * pad, c), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, pad : pad + h, pad : pad + wd, :] if pad else dxp
    return dx, dw, db


def _channel_sum(x2d):
    # BLAS reduction over rows; much faster than ndarray.sum on (N, C) for small C
    return np.ones(x2d.shape[0], dtype=x2d.dtype) @ x2d


def bn_forward(x, gamma, beta, running_mean, running_var, train: bool):
    """Batch norm over (B, H, W) per channel. Returns (y, cache, new running stats)."""
    shape = x.shape
    x2 = x.reshape(-1, shape[-1])
    if train:
        n = x2.shape[0]
        mu = _channel_sum(x2) / n
        xc = x2 - mu
        var = _channel_sum(xc * xc) / n
        unbiased = var * n / max(n - 1, 1)
        new_stats = (
            (1 - BN_MOMENTUM) * running_mean + BN_MOMENTUM * mu,
            (1 - BN_MOMENTUM) * running_var + BN_MOMENTUM * unbiased,
        )
    else:
        xc = x2 - running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
        new_stats = None
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = xc * inv_std
    return (gamma * xhat + beta).reshape(shape), (xhat, inv_std, gamma, train, shape), new_stats


def bn_backward(dy, cache):
    xhat, inv_std, gamma, train, shape = cache
    dy2 = dy.reshape(-1, shape[-1])
    dgamma = _channel_sum(dy2 * xhat)
    dbeta = _channel_sum(dy2)
    if not train:
        return (dy2 * (gamma * inv_std)).reshape(shape), dgamma, dbeta
    n = dy2.shape[0]
    dx = (gamma * inv_std) * (dy2 - dbeta / n - xhat * (dgamma / n))
    return dx.reshape(shape), dgamma, dbeta


def relu_forward(x, mask=None):
    if mask is None:
        mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def maxpool_forward(x, masks=None):
    """2x2 max-pool, stride 2, ceil mode (odd edges padded with -inf).

    Passing the ``masks`` of an earlier call re-uses that call's selection.
    """
    bsz, h, w, c = x.shape
    h2, w2 = -(-h // 2), -(-w // 2)
    if (h2 * 2, w2 * 2) != (h, w):
        x = np.pad(x, ((0, 0), (0, h2 * 2 - h), (0, w2 * 2 - w), (0, 0)), constant_values=-np.inf)
    quads = (x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2])
    if masks is not None:
        out = sum(np.where(m, q, 0) for m, q in zip(masks, quads))
        return out, (masks, (bsz, h, w, c))
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    # route the gradient to the first maximal entry of each window
    taken = np.zeros(out.shape, dtype=bool)
    masks = []
    for q in quads:
        m = (q == out) & ~taken
        taken |= m
        masks.append(m)
    return out, (masks, (bsz, h, w, c))


def maxpool_backward(dout, cache):
    masks, (bsz, h, w, c) = cache
    _, h2, w2, _ = dout.shape
    dx = np.empty((bsz, h2 * 2, w2 * 2, c), dtype=dout.dtype)
    dx[:, 0::2, 0::2] = dout * masks[0]
    dx[:, 0::2, 1::2] = dout * masks[1]
    dx[:, 1::2, 0::2] = dout * masks[2]
    dx[:, 1::2, 1::2] = dout * masks[3]
    return dx[:, :h, :w, :]


def dense_forward(x, w, b):
    flat = x.reshape(x.shape[0], -1)
    return flat @ w.T + b, (flat, x.shape, w)


def dense_backward(dout, cache):
    flat, xshape, w = cache
    return (dout @ w).reshape(xshape), dout.T @ flat, dout.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    bsz = logits.shape[0]
    loss = -logp[np.arange(bsz), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(bsz), labels] -= 1.0
    return float(loss), dlogits / bsz


# ------------------------------------------------------------------- model


def feature_map_shape(rows: int, cols: int = N_FRAMES, n_layers: int = 4) -> tuple[int, int]:
    """Spatial size after the pool and ``n_layers`` stride-2 stages (each halves, rounding up)."""
    for _ in range(n_layers + 1):
        rows, cols = -(-rows // 2), -(-cols // 2)
    return rows, cols


def _xavier(rng, shape, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_model(input_rows: int, seed: int = 0, widths=WIDTHS, n_frames: int = N_FRAMES) -> dict[str, np.ndarray]:
    """Xavier-uniform weights, zero biases, identity batch norm."""
    if not MIN_ROWS <= input_rows <= MAX_ROWS:
        raise ValueError(f"input_rows must be in [{MIN_ROWS}, {MAX_ROWS}], got {input_rows}")
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}

    def conv(name, cin, cout, k):
        params[f"{name}.w"] = _xavier(rng, (cout, cin, k, k), cin * k * k, cout * k * k)
        params[f"{name}.b"] = np.zeros(cout)

    def bn(name, c):
        params[f"{name}.gamma"] = np.ones(c)
        params[f"{name}.beta"] = np.zeros(c)
        params[f"{name}.running_mean"] = np.zeros(c)
        params[f"{name}.running_var"] = np.ones(c)

    conv("stem.conv", 1, widths[0], 3)
    bn("stem.bn", widths[0])
    cin = widths[0]
    for li, cout in enumerate(widths, start=1):
        for bi in (0, 1):
            pre = f"layer{li}.{bi}"
            conv(f"{pre}.conv1", cin if bi == 0 else cout, cout, 3)
            bn(f"{pre}.bn1", cout)
            conv(f"{pre}.conv2", cout, cout, 3)
            bn(f"{pre}.bn2", cout)
            if bi == 0:
                conv(f"{pre}.proj", cin, cout, 1)
                bn(f"{pre}.proj_bn", cout)
        cin = cout
    h, w = feature_map_shape(input_rows, n_frames, len(widths))
    flat = h * w * widths[-1]
    params["fc.w"] = _xavier(rng, (2, flat), flat, 2)
    params["fc.b"] = np.zeros(2)
    return params


def is_trainable(name: str) -> bool:
    return not (name.endswith(".running_mean") or name.endswith(".running_var"))


def trainable(params) -> dict[str, np.ndarray]:
    return {k: v for k, v in params.items() if is_trainable(k)}


def n_layers(params) -> int:
    n = 0
    while f"layer{n + 1}.0.conv1.w" in params:
        n += 1
    return n


@dataclass
class ForwardTrace:
    mode: str
    caches: dict = field(default_factory=dict, repr=False)
    running: dict = field(default_factory=dict, repr=False)
    stem_preact: np.ndarray | None = field(default=None, repr=False)
    frozen: dict = field(default_factory=dict, repr=False)

    def mask(self, name):
        return self.frozen.get(name, (None,))[0] if name.endswith("pool") else self.frozen.get(name)


def _conv_bn(params, trace, name_conv, name_bn, x, stride, pad, train):
    y, c1 = conv_forward(x, params[f"{name_conv}.w"], params[f"{name_conv}.b"], stride, pad)
    trace.caches[name_conv] = c1
    y, c2, stats = bn_forward(
        y,
        params[f"{name_bn}.gamma"],
        params[f"{name_bn}.beta"],
        params[f"{name_bn}.running_mean"],
        params[f"{name_bn}.running_var"],
        train,
    )
    trace.caches[name_bn] = c2
    if stats is not None:
        trace.running[f"{name_bn}.running_mean"], trace.running[f"{name_bn}.running_var"] = stats
    return y


def _conv_bn_back(grads, trace, name_conv, name_bn, dy, need_dx=True):
    dy, grads[f"{name_bn}.gamma"], grads[f"{name_bn}.beta"] = bn_backward(dy, trace.caches[name_bn])
    dx, grads[f"{name_conv}.w"], grads[f"{name_conv}.b"] = conv_backward(dy, trace.caches[name_conv], need_dx)
    return dx


def _block_forward(params, trace, pre, x, down, train):
    a = _conv_bn(params, trace, f"{pre}.conv1", f"{pre}.bn1", x, 2 if down else 1, 1, train)
    a, trace.caches[f"{pre}.relu1"] = relu_forward(a, trace.mask(f"{pre}.relu1"))
    a = _conv_bn(params, trace, f"{pre}.conv2", f"{pre}.bn2", a, 1, 1, train)
    skip = _conv_bn(params, trace, f"{pre}.proj", f"{pre}.proj_bn", x, 2, 0, train) if down else x
    out, trace.caches[f"{pre}.relu_out"] = relu_forward(a + skip, trace.mask(f"{pre}.relu_out"))
    return out


def _block_backward(grads, trace, pre, dout, down):
    dsum = relu_backward(dout, trace.caches[f"{pre}.relu_out"])
    da = _conv_bn_back(grads, trace, f"{pre}.conv2", f"{pre}.bn2", dsum)
    da = relu_backward(da, trace.caches[f"{pre}.relu1"])
    dx = _conv_bn_back(grads, trace, f"{pre}.conv1", f"{pre}.bn1", da)
    if down:
        dx = dx + _conv_bn_back(grads, trace, f"{pre}.proj", f"{pre}.proj_bn", dsum)
    else:
        dx = dx + dsum
    return dx


def forward(params, batch, mode: str = "infer", freeze: ForwardTrace | None = None):
    """Run the network on a (B, 1, d, T) batch.

    In ``"train"`` mode batch norm uses batch statistics and the updated
    running statistics are returned in ``trace.running`` (``params`` is
    never modified). A float32 batch runs the whole pass in float32;
    anything else runs in float64. ``freeze`` replays the ReLU and max-pool
    selections of an earlier trace, which makes the network smooth in its
    parameters around that point (used by finite-difference checks).
    Returns ``(logits, probs, trace)``.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    batch = np.asarray(batch)
    dtype = np.float32 if batch.dtype == np.float32 else np.float64
    batch = batch.astype(dtype, copy=False)
    params = {k: v.astype(dtype, copy=False) for k, v in params.items()}
    if batch.ndim != 4 or batch.shape[1] != 1 or batch.shape[0] == 0:
        raise ValueError(f"expected a non-empty (B, 1, d, T) batch, got shape {batch.shape}")
    nl = n_layers(params)
    width = params[f"layer{nl}.1.conv2.w"].shape[0]
    h, w = feature_map_shape(batch.shape[2], batch.shape[3], nl)
    if h * w * width != params["fc.w"].shape[1]:
        raise ValueError(
            f"input of shape {batch.shape[2:]} does not match the model (dense layer expects "
            f"{params['fc.w'].shape[1]} features, input gives {h * w * width})"
        )
    train = mode == "train"
    trace = ForwardTrace(mode)
    if freeze is not None:
        trace.frozen = freeze.caches
    x = batch.transpose(0, 2, 3, 1)
    y, trace.caches["stem.conv"] = conv_forward(x, params["stem.conv.w"], params["stem.conv.b"], 1, 1)
    trace.stem_preact = y
    y, trace.caches["stem.bn"], stats = bn_forward(
        y,
        params["stem.bn.gamma"],
        params["stem.bn.beta"],
        params["stem.bn.running_mean"],
        params["stem.bn.running_var"],
        train,
    )
    if stats is not None:
        trace.running["stem.bn.running_mean"], trace.running["stem.bn.running_var"] = stats
    y, trace.caches["stem.relu"] = relu_forward(y, trace.mask("stem.relu"))
    y, trace.caches["stem.pool"] = maxpool_forward(y, trace.mask("stem.pool"))
    for li in range(1, nl + 1):
        y = _block_forward(params, trace, f"layer{li}.0", y, True, train)
        y = _block_forward(params, trace, f"layer{li}.1", y, False, train)
    logits, trace.caches["fc"] = dense_forward(y, params["fc.w"], params["fc.b"])
    return logits, softmax(logits), trace


def backward(params, trace: ForwardTrace, dlogits) -> dict[str, np.ndarray]:
    """Gradients of all trainable parameters given d(loss)/d(logits)."""
    grads: dict[str, np.ndarray] = {}
    dy, grads["fc.w"], grads["fc.b"] = dense_backward(dlogits, trace.caches["fc"])
    for li in range(n_layers(params), 0, -1):
        dy = _block_backward(grads, trace, f"layer{li}.1", dy, False)
        dy = _block_backward(grads, trace, f"layer{li}.0", dy, True)
    dy = maxpool_backward(dy, trace.caches["stem.pool"])
    dy = relu_backward(dy, trace.caches["stem.relu"])
    _conv_bn_back(grads, trace, "stem.conv", "stem.bn", dy, need_dx=False)
    return {k: grads[k] for k in params if is_trainable(k)}


def loss_and_grad(params, batch, labels, return_trace: bool = False):
    """Mean cross-entropy of a train-mode forward pass and its exact gradients."""
    logits, probs, trace = forward(params, batch, "train")
    loss, dlogits = cross_entropy(logits, labels)
    grads = backward(params, trace, dlogits)
    if return_trace:
        return loss, grads, trace, probs
    return loss, grads


def predict_proba(params, batch, chunk: int = 64) -> np.ndarray:
    """Infer-mode class probabilities, evaluated in chunks."""
    batch = np.asarray(batch)
    out = [forward(params, batch[i : i + chunk], "infer")[1] for i in range(0, len(batch), chunk)]
    return np.concatenate(out, axis=0)


def predict_segment(params, feats) -> tuple[int, float]:
    """Class (0 normal, 1 abnormal; ties go to 0) and p(abnormal) for one normalised matrix."""
    values = getattr(feats, "values", feats)
    probs = forward(params, np.asarray(values)[None, None], "infer")[1][0]
    return int(np.argmax(probs)), float(probs[1])


def stem_correlation(params, feats) -> np.ndarray:
    """First-layer kernel correlation without bias, shape (N, d, T, n_kernels)."""
    x = np.asarray(feats, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    w = params["stem.conv.w"]
    return conv_forward(x[..., None], w, np.zeros(w.shape[0]), 1, 1)[0]
