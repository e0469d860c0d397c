"""Dense numeric kernels for the instrument ConvNet.

Every layer is a pair of pure functions: ``*_forward`` returns the output
and a cache, ``*_backward`` consumes the upstream gradient plus that cache
and returns gradients. Nothing here mutates a :class:`Parameter`, so
forward/backward over different mini-batch shards can run in parallel.

Feature maps are laid out channel-major, ``(C, N, H, W)``, which turns a
3x3 convolution into one ``(C_out, 9 C_in) @ (9 C_in, N H W)`` product.
The single-sample wrappers (:func:`conv2d`, :func:`maxpool2d`, ...) accept
``(C, H, W)`` arrays and are what the tests and notebooks call.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

DTYPE = np.float64
LOG_EPS = 1e-7
POOL = 3


class ShapeError(ValueError):
    """Raised when an input does not have the layout a kernel requires."""


@dataclass
class Parameter:
    """A learnable array together with its Adam state."""

    value: np.ndarray
    name: str = ""
    grad: np.ndarray | None = None
    adam_m: np.ndarray = field(default=None)  # type: ignore[assignment]
    adam_v: np.ndarray = field(default=None)  # type: ignore[assignment]
    step_count: int = 0

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=DTYPE)
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.value)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None


@dataclass(frozen=True)
class ActivationKind:
    """Nonlinearity applied after every convolution and the hidden dense layer.

    ``kind`` is one of ``tanh``, ``relu``, ``lrelu`` or ``prelu``. ``alpha`` is
    the fixed negative slope for ``lrelu`` and the initial slope for ``prelu``
    (whose per-channel slopes are learnable parameters owned by the model).
    """

    kind: str = "lrelu"
    alpha: float = 0.33

    KINDS = ("tanh", "relu", "lrelu", "prelu")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown activation {self.kind!r}; expected one of {self.KINDS}")
        if self.kind in ("lrelu", "prelu") and not 0.0 < self.alpha < 1.0:
            raise ValueError(f"negative slope must lie in (0, 1), got {self.alpha}")

    @classmethod
    def parse(cls, text: str, alpha: float | None = None) -> "ActivationKind":
        """Parse ``lrelu``, ``lrelu(0.01)``, ``prelu``, ``relu`` or ``tanh``."""
        text = text.strip().lower()
        if "(" in text:
            name, arg = text.rstrip(")").split("(", 1)
            return cls(name.strip(), float(arg))
        if text == "prelu":
            return cls("prelu", 0.25 if alpha is None else alpha)
        if text in ("relu", "tanh"):
            return cls(text, 0.0)
        return cls(text, 0.33 if alpha is None else alpha)

    def __str__(self):
        if self.kind == "lrelu":
            return f"lrelu({self.alpha:g})"
        return self.kind


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    c, n = xp.shape[:2]
    cols = np.empty((c, 9, n, out_h, out_w), dtype=xp.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, 3 * i + j] = xp[:, :, i:i + out_h, j:j + out_w]
    return cols.reshape(c * 9, n * out_h * out_w)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, need_dx: bool = True):
    """3x3 stride-1 cross-correlation with two zeros of padding per side.

    ``x`` is ``(C_in, N, H, W)``; the result is ``(C_out, N, H + 2, W + 2)``.
    The cache keeps the unfolded input, trading memory for a second unfold.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (C, N, H, W), got shape {x.shape}")
    c_in, n, h, wd = x.shape
    if w.ndim != 4 or w.shape[1:] != (c_in, 3, 3):
        raise ShapeError(f"kernel {w.shape} does not match {c_in} input channels")
    c_out = w.shape[0]
    if b.shape != (c_out,):
        raise ShapeError(f"bias {b.shape} does not match {c_out} filters")
    out_h, out_w = h + 2, wd + 2
    xp = np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)))
    cols = _im2col(xp, out_h, out_w)
    out = w.reshape(c_out, -1) @ cols
    out += b[:, None]
    return out.reshape(c_out, n, out_h, out_w), (cols, w, need_dx)


def conv2d_backward(dout: np.ndarray, cache):
    """Return ``(dx, dw, db)`` for :func:`conv2d_forward`; ``dx`` is ``None`` when not requested."""
    cols, w, need_dx = cache
    c_out, n, out_h, out_w = dout.shape
    dmat = dout.reshape(c_out, -1)
    dw = (dmat @ cols.T).reshape(w.shape)
    db = dmat.sum(axis=1)
    if not need_dx:
        return None, dw, db
    # the input gradient is a valid correlation of dout with the flipped,
    # channel-transposed kernel; no padding is needed since out = in + 2
    c_in = w.shape[1]
    flipped = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, -1)
    dx = flipped @ _im2col(dout, out_h - 2, out_w - 2)
    return dx.reshape(c_in, n, out_h - 2, out_w - 2), dw, db


# ---------------------------------------------------------------------------
# pooling


def maxpool_forward(x: np.ndarray):
    """3x3 max-pooling with stride 3 and no padding over ``(C, N, H, W)``."""
    c, n, h, w = x.shape
    if h < POOL or w < POOL:
        raise ShapeError(f"max-pooling needs spatial dims >= 3, got {h}x{w}")
    oh, ow = (h - POOL) // POOL + 1, (w - POOL) // POOL + 1
    win = x[:, :, :oh * POOL, :ow * POOL].reshape(c, n, oh, POOL, ow, POOL)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(c, n, oh, ow, POOL * POOL)
    # argmax returns the first maximum, i.e. row-major tie-breaking
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool_backward(dout: np.ndarray, cache):
    shape, idx = cache
    c, n, h, w = shape
    oh, ow = idx.shape[2:]
    routed = np.zeros((c, n, oh, ow, POOL * POOL), dtype=dout.dtype)
    np.put_along_axis(routed, idx[..., None], dout[..., None], axis=-1)
    routed = routed.reshape(c, n, oh, ow, POOL, POOL).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, :, :oh * POOL, :ow * POOL] = routed.reshape(c, n, oh * POOL, ow * POOL)
    return dx


def global_max_pool_forward(x: np.ndarray):
    """Per-channel maximum over all positions; ``(C, N, H, W) -> (N, C)``."""
    c, n, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError("global max-pooling needs a non-empty map")
    flat = x.reshape(c, n, h * w)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out.T.copy(), (x.shape, idx)


def global_max_pool_backward(dout: np.ndarray, cache):
    shape, idx = cache
    c, n, h, w = shape
    dx = np.zeros((c, n, h * w), dtype=dout.dtype)
    np.put_along_axis(dx, idx[..., None], dout.T[..., None], axis=-1)
    return dx.reshape(shape)


# ---------------------------------------------------------------------------
# dense


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Affine map over a batch: ``(N, N_in) -> (N, N_out)`` with ``w`` ``(N_out, N_in)``."""
    if x.ndim != 2 or w.ndim != 2 or w.shape[1] != x.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"dense: input {x.shape}, weights {w.shape}, bias {b.shape}")
    return x @ w.T + b, (x, w)


def dense_backward(dout: np.ndarray, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


# ---------------------------------------------------------------------------
# activations


def _channel_view(alpha: np.ndarray, ndim: int) -> np.ndarray:
    # channel axis is 0 for (C, N, H, W) maps and 1 for (N, C) dense outputs
    if ndim == 2:
        return alpha[None, :]
    return alpha.reshape((-1,) + (1,) * (ndim - 1))


def activate_forward(z: np.ndarray, kind: ActivationKind, alpha: np.ndarray | None = None,
                     inplace: bool = False):
    """Apply ``kind`` elementwise; ``alpha`` holds per-channel PReLU slopes.

    With ``inplace`` the result overwrites ``z`` (the network does this for
    freshly computed pre-activations).
    """
    k = kind.kind
    y = z if inplace else z.copy()
    if k == "tanh":
        np.tanh(y, out=y)
        return y, (k, y)
    if k == "prelu":
        if alpha is None:
            raise ValueError("prelu needs per-channel slopes")
        channels = z.shape[1] if z.ndim == 2 else z.shape[0]
        if alpha.shape != (channels,):
            raise ShapeError(f"prelu has {alpha.shape[0]} slopes for {channels} channels")
        zc = z.copy() if inplace else z
        neg = zc < 0
        np.multiply(y, _channel_view(alpha, z.ndim), out=y, where=neg)
        return y, (k, neg, zc, alpha)
    neg = z < 0
    slope = 0.0 if k == "relu" else kind.alpha
    np.multiply(y, slope, out=y, where=neg)
    return y, (k, neg, slope)


def activate_backward(dy: np.ndarray, cache, inplace: bool = False):
    """Return ``(dz, dalpha)``; ``dalpha`` is ``None`` except for PReLU.

    The derivative at exactly zero is taken from the positive branch.
    """
    k = cache[0]
    if k == "tanh":
        y = cache[1]
        return dy * (1.0 - y * y), None
    neg = cache[1]
    dz = dy if inplace else dy.copy()
    if k == "prelu":
        _, _, z, alpha = cache
        contrib = np.where(neg, z * dy, 0.0)
        if z.ndim == 2:
            dalpha = contrib.sum(axis=0)
        else:
            dalpha = contrib.reshape(z.shape[0], -1).sum(axis=1)
        np.multiply(dz, _channel_view(alpha, z.ndim), out=dz, where=neg)
        return dz, dalpha
    np.multiply(dz, cache[2], out=dz, where=neg)
    return dz, None


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Logistic function, evaluated without overflow for large ``|z|``."""
    z = np.asarray(z, dtype=DTYPE)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dy * y * (1.0 - y)


# ---------------------------------------------------------------------------
# dropout


def dropout_forward(x: np.ndarray, rate: float, training: bool, rng: np.random.Generator | None):
    """Inverted dropout; identity at inference or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(dout: np.ndarray, mask):
    return dout if mask is None else dout * mask


# ---------------------------------------------------------------------------
# loss


def _check_one_hot(target: np.ndarray):
    ok = np.all((target == 0) | (target == 1)) and np.all(target.sum(axis=-1) == 1)
    if not ok:
        raise ValueError("training targets must be one-hot")


def categorical_cross_entropy(pred: np.ndarray, target: np.ndarray, eps: float = LOG_EPS) -> float:
    """``-sum(t * ln(clip(p, eps, 1 - eps)))`` on sigmoid outputs, summed over a batch."""
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    _check_one_hot(target)
    return float(-(target * np.log(np.clip(pred, eps, 1.0 - eps))).sum())


def categorical_cross_entropy_grad(pred: np.ndarray, target: np.ndarray, eps: float = LOG_EPS):
    pred = np.asarray(pred, dtype=DTYPE)
    inside = (pred > eps) & (pred < 1.0 - eps)
    return np.where(inside, -target / np.clip(pred, eps, 1.0), 0.0)


def normalized_cross_entropy(pred: np.ndarray, target: np.ndarray, eps: float = LOG_EPS):
    """Categorical cross-entropy after rescaling each sigmoid row to sum to one.

    Returns ``(loss, dloss/dpred)`` with the loss summed over the batch. Unlike
    :func:`categorical_cross_entropy`, this pushes the non-target outputs down
    as well, which is what makes sigmoid outputs usable for thresholding.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=DTYPE))
    target = np.atleast_2d(np.asarray(target, dtype=DTYPE))
    _check_one_hot(target)
    total = pred.sum(axis=1, keepdims=True)
    q = pred / total
    qc = np.clip(q, eps, 1.0 - eps)
    loss = float(-(target * np.log(qc)).sum())
    dq = np.where((q > eps) & (q < 1.0 - eps), -target / qc, 0.0)
    dpred = (dq - (dq * q).sum(axis=1, keepdims=True)) / total
    return loss, dpred


def binary_cross_entropy(pred: np.ndarray, target: np.ndarray, eps: float = LOG_EPS):
    """Per-class binary cross-entropy on sigmoid outputs, summed over classes and batch.

    Returns ``(loss, dloss/dpred)``.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=DTYPE))
    target = np.atleast_2d(np.asarray(target, dtype=DTYPE))
    pc = np.clip(pred, eps, 1.0 - eps)
    loss = float(-(target * np.log(pc) + (1.0 - target) * np.log1p(-pc)).sum())
    inside = (pred > eps) & (pred < 1.0 - eps)
    dpred = np.where(inside, (pc - target) / (pc * (1.0 - pc)), 0.0)
    return loss, dpred


# ---------------------------------------------------------------------------
# optimizer and initialisation


def adam_step(param: Parameter, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> Parameter:
    """Bias-corrected Adam update in place; the gradient is left for the caller to clear."""
    if param.grad is None:
        raise ValueError(f"parameter {param.name or '?'} has no gradient")
    g = param.grad
    param.step_count += 1
    t = param.step_count
    param.adam_m *= beta1
    param.adam_m += (1.0 - beta1) * g
    param.adam_v *= beta2
    param.adam_v += (1.0 - beta2) * g * g
    m_hat = param.adam_m / (1.0 - beta1 ** t)
    v_hat = param.adam_v / (1.0 - beta2 ** t)
    param.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param


def fans(shape) -> tuple[int, int]:
    """Fan-in and fan-out; conv kernels count the 3x3 receptive field."""
    shape = tuple(shape)
    if len(shape) == 4:
        rf = shape[2] * shape[3]
        return shape[1] * rf, shape[0] * rf
    if len(shape) == 2:
        return shape[1], shape[0]
    if len(shape) == 1:
        return shape[0], shape[0]
    raise ValueError(f"cannot infer fans for shape {shape}")


def glorot_limit(shape) -> float:
    fan_in, fan_out = fans(shape)
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def glorot_uniform_init(shape, rng: np.random.Generator) -> np.ndarray:
    if not len(shape):
        raise ValueError("shape must be non-empty")
    limit = glorot_limit(shape)
    return rng.uniform(-limit, limit, size=tuple(shape)).astype(DTYPE)


# ---------------------------------------------------------------------------
# single-sample wrappers, (C, H, W) in and out


def conv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    out, _ = conv2d_forward(np.asarray(x, DTYPE)[:, None], weights, bias)
    return out[:, 0]


def maxpool2d(x: np.ndarray) -> np.ndarray:
    out, _ = maxpool_forward(np.asarray(x, DTYPE)[:, None])
    return out[:, 0]


def global_max_pool(x: np.ndarray) -> np.ndarray:
    out, _ = global_max_pool_forward(np.asarray(x, DTYPE)[:, None])
    return out[0]


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    out, _ = dense_forward(np.asarray(x, DTYPE)[None], weights, bias)
    return out[0]


def activate(z: np.ndarray, kind: ActivationKind, alpha: np.ndarray | None = None) -> np.ndarray:
    return activate_forward(np.asarray(z, DTYPE), kind, alpha)[0]


def dropout(x: np.ndarray, rate: float, training: bool, rng=None) -> np.ndarray:
    return dropout_forward(np.asarray(x, DTYPE), rate, training, rng)[0]


# ---------------------------------------------------------------------------
# finite-difference check


def gradient_check(forward: Callable[..., np.ndarray], backward: Callable[[np.ndarray], tuple],
                   inputs: list[np.ndarray], h: float = 1e-5,
                   rng: np.random.Generator | None = None) -> float:
    """Compare an analytic backward pass with central differences.

    ``forward(*inputs)`` must return an array; ``backward(dout)`` must return
    gradients for every entry of ``inputs`` (in order) after a forward call on
    the unperturbed inputs. The scalar probed is ``sum(forward(...) * r)`` for
    a fixed random ``r``, so every output coordinate contributes. Returns the
    maximum relative error over all input coordinates.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    inputs = [np.array(a, dtype=DTYPE) for a in inputs]
    out = forward(*inputs)
    r = rng.standard_normal(np.shape(out))
    analytic = backward(r)
    worst = 0.0
    for a, g in zip(inputs, analytic):
        g = np.asarray(g)
        num = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            orig = a[ix]
            a[ix] = orig + h
            fp = float((forward(*inputs) * r).sum())
            a[ix] = orig - h
            fm = float((forward(*inputs) * r).sum())
            a[ix] = orig
            num[ix] = (fp - fm) / (2.0 * h)
        denom = np.maximum(np.abs(num) + np.abs(g), 1e-8)
        worst = max(worst, float(np.max(np.abs(num - g) / denom)))
    return worst
