"""Layer primitives with hand-written backward passes.

Every forward function returns ``(out, ctx)``. The matching ``*_backward``
function takes ``(grad_out, ctx)`` and returns the input gradient followed by
any parameter gradients. A context can be consumed exactly once; reusing it,
or handing it to the wrong backward, raises :class:`ContextMismatch`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContextMismatch, DegenerateInput, InvalidLabel, InvalidRate, ShapeMismatch
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

TRAIN = "train"
INFER = "infer"


class Context:
    __slots__ = ("op", "out_shape", "saved", "consumed")

    def __init__(self, op: str, out_shape: tuple, **saved):
        self.op = op
        self.out_shape = tuple(out_shape)
        self.saved = saved
        self.consumed = False

    def __repr__(self):
        state = "consumed" if self.consumed else "live"
        return f"Context({self.op}, out={self.out_shape}, {state})"


def _consume(ctx: Context, op: str, grad_out: Tensor) -> dict:
    if not isinstance(ctx, Context) or ctx.op != op:
        got = getattr(ctx, "op", type(ctx).__name__)
        raise ContextMismatch(f"{op} backward got a context from {got}")
    if ctx.consumed:
        raise ContextMismatch(f"{op} context already consumed")
    if tuple(grad_out.shape) != ctx.out_shape:
        raise ContextMismatch(
            f"{op} backward: grad shape {grad_out.shape} != forward output {ctx.out_shape}"
        )
    ctx.consumed = True
    return ctx.saved


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, INFER):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")


@dataclass
class LayerParams:
    """Named parameter group: trainable ``weights`` and non-trainable ``buffers``."""

    name: str
    weights: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def tensors(self):
        for key, value in self.weights.items():
            yield key, value, True
        for key, value in self.buffers.items():
            yield key, value, False

    @property
    def num_trainable(self) -> int:
        return sum(int(v.size) for v in self.weights.values())

    @property
    def num_non_trainable(self) -> int:
        return sum(int(v.size) for v in self.buffers.values())


# ---------------------------------------------------------------------------
# convolutions


def _conv_geometry(h: int, w: int, k: int, stride: int, padding: str):
    if padding == "same":
        pad = k // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DegenerateInput(f"{h}x{w} input too small for {k}x{k} valid convolution")
    return pad, ho, wo


def depthwise_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same"):
    """Per-channel spatial convolution (cross-correlation). ``kernel`` is (C, k, k)."""
    n, c, h, w = x.shape
    if kernel.ndim != 3 or kernel.shape[0] != c or kernel.shape[1] != kernel.shape[2]:
        raise ShapeMismatch(f"depthwise kernel {kernel.shape} does not fit input {x.shape}")
    k = kernel.shape[1]
    pad, ho, wo = _conv_geometry(h, w, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(x, kernel))
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            win = xp[:, :, i:i + hspan:stride, j:j + wspan:stride]
            out += win * kernel[:, i, j][None, :, None, None]
    ctx = Context("depthwise_conv2d", out.shape, xp=xp, kernel=kernel, stride=stride,
                  pad=pad, in_shape=x.shape)
    return out, ctx


def depthwise_conv2d_backward(dout: Tensor, ctx: Context):
    s = _consume(ctx, "depthwise_conv2d", dout)
    xp, kernel, stride, pad = s["xp"], s["kernel"], s["stride"], s["pad"]
    k = kernel.shape[1]
    _, _, ho, wo = dout.shape
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    dxp = np.zeros_like(xp)
    dkernel = np.empty_like(kernel)
    for i in range(k):
        for j in range(k):
            win = xp[:, :, i:i + hspan:stride, j:j + wspan:stride]
            dkernel[:, i, j] = np.einsum("nchw,nchw->c", win, dout)
            dxp[:, :, i:i + hspan:stride, j:j + wspan:stride] += dout * kernel[:, i, j][None, :, None, None]
    h, w = s["in_shape"][2:]
    dx = dxp[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(dx), dkernel


def pointwise_conv2d(x: Tensor, kernel: Tensor, bias: Tensor):
    """1x1 convolution: ``out[n,o,h,w] = sum_c x[n,c,h,w] * kernel[c,o] + bias[o]``."""
    n, c, h, w = x.shape
    if kernel.ndim != 2 or kernel.shape[0] != c:
        raise ShapeMismatch(f"pointwise kernel {kernel.shape} does not fit input {x.shape}")
    if bias.shape != (kernel.shape[1],):
        raise ShapeMismatch(f"bias {bias.shape} does not match kernel {kernel.shape}")
    cout = kernel.shape[1]
    flat = x.reshape(n, c, h * w)
    out = np.matmul(kernel.T, flat) + bias[None, :, None]
    out = out.reshape(n, cout, h, w)
    return out, Context("pointwise_conv2d", out.shape, x=x, kernel=kernel)


def pointwise_conv2d_backward(dout: Tensor, ctx: Context):
    s = _consume(ctx, "pointwise_conv2d", dout)
    x, kernel = s["x"], s["kernel"]
    n, c, h, w = x.shape
    cout = kernel.shape[1]
    d = dout.reshape(n, cout, h * w)
    dx = np.matmul(kernel, d).reshape(x.shape)
    xt = x.reshape(n, c, h * w).transpose(1, 0, 2).reshape(c, n * h * w)
    dt = d.transpose(1, 0, 2).reshape(cout, n * h * w)
    dkernel = xt @ dt.T
    dbias = dt.sum(axis=1)
    return dx, dkernel, dbias


# ---------------------------------------------------------------------------
# pointwise nonlinearities and normalization


def relu(x: Tensor):
    out = np.maximum(x, 0)
    return out, Context("relu", out.shape, mask=x > 0)


def relu_backward(dout: Tensor, ctx: Context):
    s = _consume(ctx, "relu", dout)
    return dout * s["mask"]


def sigmoid(x: Tensor):
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, Context("sigmoid", out.shape, out=out)


def sigmoid_backward(dout: Tensor, ctx: Context):
    y = _consume(ctx, "sigmoid", dout)["out"]
    return dout * y * (1 - y)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor,
               running_var: Tensor, mode: str, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPS):
    """Per-channel batch normalization over (N, H, W).

    In train mode the running statistics are updated in place:
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    _check_mode(mode)
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean),
                    ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeMismatch(f"{name} {t.shape} does not match {c} channels")
    bshape = (1, c, 1, 1)
    if mode == TRAIN:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var = running_mean.copy(), running_var.copy()
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(bshape)) * invstd.reshape(bshape)
    out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    ctx = Context("batch_norm", out.shape, xhat=xhat, invstd=invstd, gamma=gamma, mode=mode)
    return out, ctx


def batch_norm_backward(dout: Tensor, ctx: Context):
    s = _consume(ctx, "batch_norm", dout)
    xhat, invstd, gamma = s["xhat"], s["invstd"], s["gamma"]
    bshape = (1, -1, 1, 1)
    dgamma = np.einsum("nchw,nchw->c", dout, xhat)
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma.reshape(bshape)
    if s["mode"] == INFER:
        return dxhat * invstd.reshape(bshape), dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    # gamma * sum(dout) == sum(dxhat); reuse the parameter grads
    sum_dxhat = (gamma * dbeta).reshape(bshape)
    sum_dxhat_xhat = (gamma * dgamma).reshape(bshape)
    dx = (invstd.reshape(bshape) / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# separable convolution block


def sepconv_block(x: Tensor, params: LayerParams, k: Optional[int] = None, mode: str = INFER,
                  bn_order: str = "literal", momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Depthwise k x k, pointwise projection with bias, ReLU and BatchNorm.

    ``bn_order="literal"`` applies ReLU before BatchNorm,
    ``bn_order="conventional"`` applies BatchNorm before ReLU.
    """
    wts, buf = params.weights, params.buffers
    if k is not None and wts["dw"].shape[1] != k:
        raise ShapeMismatch(f"{params.name}: kernel is {wts['dw'].shape[1]}, expected {k}")
    h, c_dw = depthwise_conv2d(x, wts["dw"])
    z, c_pw = pointwise_conv2d(h, wts["pw"], wts["bias"])
    bn_args = (wts["gamma"], wts["beta"], buf["running_mean"], buf["running_var"], mode,
               momentum, eps)
    if bn_order == "literal":
        a, c_act = relu(z)
        out, c_bn = batch_norm(a, *bn_args)
    elif bn_order == "conventional":
        a, c_bn = batch_norm(z, *bn_args)
        out, c_act = relu(a)
    else:
        raise ValueError(f"bn_order must be 'literal' or 'conventional', got {bn_order!r}")
    ctx = Context("sepconv_block", out.shape, parts=(c_dw, c_pw, c_act, c_bn), order=bn_order,
                  name=params.name)
    return out, ctx


def sepconv_block_backward(dout: Tensor, ctx: Context):
    """Returns ``(dx, grads)`` where ``grads`` is keyed like ``LayerParams.weights``."""
    s = _consume(ctx, "sepconv_block", dout)
    c_dw, c_pw, c_act, c_bn = s["parts"]
    if s["order"] == "literal":
        d, dgamma, dbeta = batch_norm_backward(dout, c_bn)
        d = relu_backward(d, c_act)
    else:
        d = relu_backward(dout, c_act)
        d, dgamma, dbeta = batch_norm_backward(d, c_bn)
    d, dpw, dbias = pointwise_conv2d_backward(d, c_pw)
    dx, ddw = depthwise_conv2d_backward(d, c_dw)
    return dx, {"dw": ddw, "pw": dpw, "bias": dbias, "gamma": dgamma, "beta": dbeta}


# ---------------------------------------------------------------------------
# pooling, resampling, dropout


def pool_output_size(n: int, k: int, stride: int, ceil_mode: bool) -> int:
    span = n - k
    out = (math.ceil(span / stride) if ceil_mode else span // stride) + 1
    if ceil_mode and (out - 1) * stride >= n:
        # the last window must start inside the input
        out -= 1
    return out


def average_pool2d(x: Tensor, k: int = 2, stride: int = 2, ceil_mode: bool = True):
    """Window means. Partial windows at the trailing edge (ceil mode) average
    only their valid cells."""
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise DegenerateInput(f"spatial extent {h}x{w}")
    ho = pool_output_size(h, k, stride, ceil_mode)
    wo = pool_output_size(w, k, stride, ceil_mode)
    if ho < 1 or wo < 1:
        raise DegenerateInput(f"{h}x{w} input too small for {k}x{k} pooling")
    ph = max((ho - 1) * stride + k, h)
    pw = max((wo - 1) * stride + k, w)
    xp = np.zeros((n, c, ph, pw), dtype=x.dtype)
    xp[:, :, :h, :w] = x
    valid = np.zeros((ph, pw), dtype=x.dtype)
    valid[:h, :w] = 1
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    total = np.zeros((n, c, ho, wo), dtype=x.dtype)
    counts = np.zeros((ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            total += xp[:, :, i:i + hspan:stride, j:j + wspan:stride]
            counts += valid[i:i + hspan:stride, j:j + wspan:stride]
    out = total / counts
    ctx = Context("average_pool2d", out.shape, counts=counts, k=k, stride=stride,
                  padded=(ph, pw), in_shape=x.shape)
    return out, ctx


def average_pool2d_backward(dout: Tensor, ctx: Context):
    s = _consume(ctx, "average_pool2d", dout)
    k, stride, counts = s["k"], s["stride"], s["counts"]
    n, c, h, w = s["in_shape"]
    ho, wo = dout.shape[2:]
    share = dout / counts
    dxp = np.zeros((n, c) + s["padded"], dtype=dout.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + hspan:stride, j:j + wspan:stride] += share
    return np.ascontiguousarray(dxp[:, :, :h, :w])


def global_average_pool(x: Tensor):
    """Spatial mean per (batch, channel); output is (N, C, 1, 1)."""
    if x.ndim != 4:
        raise ShapeMismatch(f"global_average_pool needs (N, C, H, W), got {x.shape}")
    out = x.mean(axis=(2, 3), keepdims=True)
    return out, Context("global_average_pool", out.shape, in_shape=x.shape)


def global_average_pool_backward(dout: Tensor, ctx: Context):
    s = _consume(ctx, "global_average_pool", dout)
    h, w = s["in_shape"][2:]
    return np.broadcast_to(dout / (h * w), s["in_shape"]).copy()


def nearest_upsample(x: Tensor, factor: int = 2):
    if int(factor) != factor or factor < 2:
        raise ValueError(f"upsample factor must be an integer >= 2, got {factor}")
    out = x.repeat(factor, axis=2).repeat(factor, axis=3)
    return out, Context("nearest_upsample", out.shape, factor=factor)


def nearest_upsample_backward(dout: Tensor, ctx: Context):
    f = _consume(ctx, "nearest_upsample", dout)["factor"]
    n, c, h, w = dout.shape
    return dout.reshape(n, c, h // f, f, w // f, f).sum(axis=(3, 5))


def dropout(x: Tensor, rate: float, mode: str, rng: Optional[np.random.Generator] = None):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` in train mode."""
    _check_mode(mode)
    if not 0 <= rate < 1:
        raise InvalidRate(f"dropout rate must be in [0, 1), got {rate}")
    if mode == INFER or rate == 0:
        return x, Context("dropout", x.shape, mask=None)
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = rng.random(x.shape, dtype=np.float64) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    out = x * mask
    return out, Context("dropout", out.shape, mask=mask)


def dropout_backward(dout: Tensor, ctx: Context):
    mask = _consume(ctx, "dropout", dout)["mask"]
    return dout if mask is None else dout * mask


# ---------------------------------------------------------------------------
# classifier head


def linear(x: Tensor, weight: Tensor, bias: Tensor):
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeMismatch(f"linear: bias {bias.shape} vs weight {weight.shape}")
    out = x @ weight + bias
    return out, Context("linear", out.shape, x=x, weight=weight)


def linear_backward(dout: Tensor, ctx: Context):
    s = _consume(ctx, "linear", dout)
    return dout @ s["weight"].T, s["x"].T @ dout, dout.sum(axis=0)


def softmax(x: Tensor) -> Tensor:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 0:
        labels = labels[None]
    if labels.dtype.kind not in "iu":
        raise InvalidLabel(f"labels must be integers, got {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InvalidLabel(f"label outside [0, {k})")
    return labels.astype(np.int64)


def cross_entropy(probs: Tensor, labels) -> float:
    """Mean ``-ln p[label]`` over rows of a probability matrix."""
    probs = np.atleast_2d(probs)
    if not np.allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-6):
        raise ValueError("cross_entropy expects rows that sum to 1")
    labels = _check_labels(labels, probs.shape[1])
    if labels.shape[0] != probs.shape[0]:
        raise ShapeMismatch(f"{labels.shape[0]} labels for {probs.shape[0]} rows")
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, np.finfo(probs.dtype).tiny))))


def softmax_cross_entropy(logits: Tensor, labels):
    """Fused softmax + mean cross-entropy. Returns ``(loss, probs, ctx)``."""
    labels = _check_labels(labels, logits.shape[1])
    if labels.shape[0] != logits.shape[0]:
        raise ShapeMismatch(f"{labels.shape[0]} labels for {logits.shape[0]} rows")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    probs = np.exp(logp)
    loss = float(-np.mean(logp[np.arange(len(labels)), labels]))
    return loss, probs, Context("softmax_cross_entropy", (), probs=probs, labels=labels)


def softmax_cross_entropy_backward(dloss, ctx: Context):
    s = _consume(ctx, "softmax_cross_entropy", np.asarray(dloss))
    probs, labels = s["probs"], s["labels"]
    grad = probs.copy()
    grad[np.arange(len(labels)), labels] -= 1
    return grad * (np.asarray(dloss, dtype=probs.dtype) / len(labels))


_BACKWARDS = {
    "depthwise_conv2d": depthwise_conv2d_backward,
    "pointwise_conv2d": pointwise_conv2d_backward,
    "relu": relu_backward,
    "sigmoid": sigmoid_backward,
    "batch_norm": batch_norm_backward,
    "sepconv_block": sepconv_block_backward,
    "average_pool2d": average_pool2d_backward,
    "global_average_pool": global_average_pool_backward,
    "nearest_upsample": nearest_upsample_backward,
    "dropout": dropout_backward,
    "linear": linear_backward,
    "softmax_cross_entropy": softmax_cross_entropy_backward,
}


def backward(ctx: Context, grad_out):
    """Dispatch to the backward matching ``ctx.op``."""
    try:
        fn = _BACKWARDS[ctx.op]
    except (AttributeError, KeyError):
        raise ContextMismatch(f"no backward for {ctx!r}") from None
    return fn(grad_out, ctx)
