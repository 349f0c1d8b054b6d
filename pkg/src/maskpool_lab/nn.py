"""Dense-tensor layer library: explicit forward/backward for every op the detector uses.

Tensors are plain ``numpy.ndarray`` with dtype float32 and layout (batch,
channel, height, width).  There is no autodiff graph; each layer pairs a
forward function with a hand-written backward, and ``grad_check`` compares
the two against central finite differences.

Conventions:
  - convolution uses zero padding;
  - pooling ops exclude padded positions from counts, averages and maxima;
  - reductions (means, losses) accumulate in float64 before casting back.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericError

Array = np.ndarray

FLOAT = np.float32


def as_nchw(x: Array) -> Array:
    """Validate and return a contiguous (n, c, h, w) tensor.

    float32 is the production dtype; float64 passes through unchanged so the
    gradient checker can drive the same code paths at full precision.
    """
    dtype = np.float64 if np.asarray(x).dtype == np.float64 else FLOAT
    x = np.ascontiguousarray(x, dtype=dtype)
    if x.ndim != 4:
        raise ConfigurationError(f"expected 4-d (n,c,h,w) tensor, got shape {x.shape}")
    return x


def assert_finite(x: Array, context: str = "tensor") -> None:
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite value in {context}")


@dataclass
class LayerParams:
    """One conv layer's parameters plus gradient and momentum buffers."""

    weights: Array  # (out_c, in_c, k, k)
    bias: Array     # (out_c,)
    grad_weights: Array = field(init=False)
    grad_bias: Array = field(init=False)
    vel_weights: Array = field(init=False)
    vel_bias: Array = field(init=False)

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=FLOAT)
        self.bias = np.ascontiguousarray(self.bias, dtype=FLOAT)
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)
        self.vel_weights = np.zeros_like(self.weights)
        self.vel_bias = np.zeros_like(self.bias)

    @classmethod
    def conv(cls, in_c: int, out_c: int, kernel: int, rng: np.random.Generator) -> "LayerParams":
        """He-style init: normal with std sqrt(2 / fan_in), zero bias."""
        fan_in = in_c * kernel * kernel
        w = rng.standard_normal((out_c, in_c, kernel, kernel)) * np.sqrt(2.0 / fan_in)
        return cls(weights=w.astype(FLOAT), bias=np.zeros(out_c, dtype=FLOAT))

    def zero_grad(self):
        self.grad_weights[...] = 0.0
        self.grad_bias[...] = 0.0


@dataclass
class OptimizerConfig:
    # lr 0.05 reliably kills the trunk's relus under the pixel-scale box
    # gradients; 0.01 trains all three pooling variants stably
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be non-negative, got {self.weight_decay}")


# ---------------------------------------------------------------------------
# window geometry
# ---------------------------------------------------------------------------

def out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_geometry(h: int, w: int, kernel: int, stride: int, padding: int, pooling: bool):
    if stride < 1 or padding < 0 or kernel < 1:
        raise ConfigurationError(f"bad window geometry kernel={kernel} stride={stride} padding={padding}")
    if h + 2 * padding < kernel or w + 2 * padding < kernel:
        raise ConfigurationError(f"kernel {kernel} does not fit input {h}x{w} with padding {padding}")
    # padding >= kernel would create windows made of padding only
    if pooling and padding >= kernel:
        raise ConfigurationError(f"pooling window of zero valid pixels: padding {padding} >= kernel {kernel}")


def _im2col(xp: Array, kernel: int, stride: int, oh: int, ow: int) -> Array:
    """(n, c, H, W) padded input -> (n, c, kernel*kernel, oh*ow) window columns."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kernel * kernel, oh, ow), dtype=xp.dtype)
    for i in range(kernel):
        for j in range(kernel):
            cols[:, :, i * kernel + j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c, kernel * kernel, oh * ow)


def _col2im(cols: Array, shape, kernel: int, stride: int, padding: int, oh: int, ow: int) -> Array:
    """Fold (n, c, kernel*kernel, oh*ow) columns back, accumulating overlaps."""
    n, c, h, w = shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols = cols.reshape(n, c, kernel * kernel, oh, ow)
    for i in range(kernel):
        for j in range(kernel):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i * kernel + j]
    if padding:
        return xp[:, :, padding:padding + h, padding:padding + w]
    return xp


def _pad(x: Array, padding: int, value: float = 0.0) -> Array:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                  constant_values=value)


def valid_window_counts(h: int, w: int, kernel: int, stride: int, padding: int) -> Array:
    """(kernel*kernel, oh*ow) 0/1 map of window positions that fall inside the image."""
    oh = out_size(h, kernel, stride, padding)
    ow = out_size(w, kernel, stride, padding)
    ones = np.ones((1, 1, h, w), dtype=FLOAT)
    return _im2col(_pad(ones, padding), kernel, stride, oh, ow)[0, 0]


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d_forward(x: Array, p: LayerParams, stride: int = 1, padding: int = 0) -> Array:
    """Cross-correlation with zero padding."""
    x = as_nchw(x)
    oc, ic, kh, kw = p.weights.shape
    if kh != kw:
        raise ConfigurationError("only square kernels supported")
    n, c, h, w = x.shape
    if c != ic:
        raise ConfigurationError(f"conv expects {ic} input channels, got {c}")
    _check_geometry(h, w, kh, stride, padding, pooling=False)
    oh, ow = out_size(h, kh, stride, padding), out_size(w, kw, stride, padding)
    cols = _im2col(_pad(x, padding), kh, stride, oh, ow).reshape(n, ic * kh * kw, oh * ow)
    wmat = p.weights.reshape(oc, ic * kh * kw).astype(x.dtype)
    y = np.matmul(wmat, cols) + p.bias.reshape(1, oc, 1).astype(x.dtype)
    return y.reshape(n, oc, oh, ow)


def conv2d_backward(x: Array, p: LayerParams, grad_out: Array,
                    stride: int = 1, padding: int = 0) -> Array:
    """Gradients of conv2d_forward; accumulates into p.grad_weights / p.grad_bias."""
    x = as_nchw(x)
    grad_out = as_nchw(grad_out)
    oc, ic, kh, kw = p.weights.shape
    n, c, h, w = x.shape
    oh, ow = out_size(h, kh, stride, padding), out_size(w, kw, stride, padding)
    if grad_out.shape != (n, oc, oh, ow):
        raise ConfigurationError(f"grad_out shape {grad_out.shape} != expected {(n, oc, oh, ow)}")
    cols = _im2col(_pad(x, padding), kh, stride, oh, ow).reshape(n, ic * kh * kw, oh * ow)
    g = grad_out.reshape(n, oc, oh * ow)
    # per-sample matmul then ordered sum over the batch keeps reductions fixed
    p.grad_weights += np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(p.weights.shape).astype(FLOAT)
    p.grad_bias += g.sum(axis=(0, 2)).astype(FLOAT)
    gcols = np.matmul(p.weights.reshape(oc, -1).T.astype(x.dtype), g)
    return _col2im(gcols.reshape(n, ic, kh * kw, oh * ow), x.shape, kh, stride, padding, oh, ow)


# ---------------------------------------------------------------------------
# relu
# ---------------------------------------------------------------------------

def relu_forward(x: Array) -> Array:
    return np.maximum(as_nchw(x), FLOAT(0.0))


def relu_backward(x: Array, grad_out: Array) -> Array:
    x = as_nchw(x)
    return np.where(x > 0, grad_out, 0.0).astype(x.dtype)


# ---------------------------------------------------------------------------
# pooling (padded positions are never counted, averaged or selected)
# ---------------------------------------------------------------------------

def maxpool2d_forward(x: Array, kernel: int, stride: int, padding: int = 0):
    """Returns (pooled, argmax) where argmax is the in-window index (row-major,
    first occurrence on ties) of the selected pixel."""
    x = as_nchw(x)
    n, c, h, w = x.shape
    _check_geometry(h, w, kernel, stride, padding, pooling=True)
    oh, ow = out_size(h, kernel, stride, padding), out_size(w, kernel, stride, padding)
    cols = _im2col(_pad(x, padding, value=-np.inf), kernel, stride, oh, ow)
    argmax = cols.argmax(axis=2)  # first occurrence on ties
    y = np.take_along_axis(cols, argmax[:, :, None, :], axis=2)[:, :, 0, :]
    return y.reshape(n, c, oh, ow).astype(x.dtype), argmax


def maxpool2d_backward(x: Array, argmax: Array, grad_out: Array,
                       kernel: int, stride: int, padding: int = 0) -> Array:
    x = as_nchw(x)
    grad_out = as_nchw(grad_out)
    n, c, h, w = x.shape
    oh, ow = out_size(h, kernel, stride, padding), out_size(w, kernel, stride, padding)
    if grad_out.shape != (n, c, oh, ow):
        raise ConfigurationError(f"grad_out shape {grad_out.shape} != expected {(n, c, oh, ow)}")
    gcols = np.zeros((n, c, kernel * kernel, oh * ow), dtype=x.dtype)
    np.put_along_axis(gcols, argmax[:, :, None, :], grad_out.reshape(n, c, 1, oh * ow), axis=2)
    return _col2im(gcols, x.shape, kernel, stride, padding, oh, ow)


def avgpool2d_forward(x: Array, kernel: int, stride: int, padding: int = 0) -> Array:
    """Mean over the valid (non-padded) pixels of each window."""
    x = as_nchw(x)
    n, c, h, w = x.shape
    _check_geometry(h, w, kernel, stride, padding, pooling=True)
    oh, ow = out_size(h, kernel, stride, padding), out_size(w, kernel, stride, padding)
    cols = _im2col(_pad(x, padding), kernel, stride, oh, ow)
    counts = valid_window_counts(h, w, kernel, stride, padding).sum(axis=0)
    y = cols.sum(axis=2, dtype=np.float64) / counts
    return y.reshape(n, c, oh, ow).astype(x.dtype)


def avgpool2d_backward(x: Array, grad_out: Array, kernel: int, stride: int, padding: int = 0) -> Array:
    x = as_nchw(x)
    grad_out = as_nchw(grad_out)
    n, c, h, w = x.shape
    oh, ow = out_size(h, kernel, stride, padding), out_size(w, kernel, stride, padding)
    if grad_out.shape != (n, c, oh, ow):
        raise ConfigurationError(f"grad_out shape {grad_out.shape} != expected {(n, c, oh, ow)}")
    valid = valid_window_counts(h, w, kernel, stride, padding)
    counts = valid.sum(axis=0)
    shared = (grad_out.reshape(n, c, 1, oh * ow) / counts) * valid
    return _col2im(shared.astype(x.dtype), x.shape, kernel, stride, padding, oh, ow)


# ---------------------------------------------------------------------------
# losses (each returns scalar loss and gradient wrt the first argument)
# ---------------------------------------------------------------------------

def loss_bce_logits(logits: Array, targets: Array):
    """Binary cross-entropy on logits, mean over every element."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if z.shape != t.shape:
        raise ConfigurationError(f"bce shapes differ: {z.shape} vs {t.shape}")
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    grad = (1.0 / (1.0 + np.exp(-z)) - t) / z.size
    return float(per.mean()), grad.astype(np.asarray(logits).dtype)


def loss_softmax_ce(logits: Array, class_targets: Array, valid_mask: Array):
    """Cross-entropy over (n, C, h, w) logits at cells where valid_mask is set.

    Mean over valid cells; zero valid cells yields loss 0 and zero gradient.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 4:
        raise ConfigurationError(f"expected (n,C,h,w) logits, got {z.shape}")
    tgt = np.asarray(class_targets)
    valid = np.asarray(valid_mask).astype(bool)
    if tgt.shape != valid.shape or tgt.shape != (z.shape[0],) + z.shape[2:]:
        raise ConfigurationError("class targets / valid mask must be (n,h,w) matching logits")
    out_dtype = np.asarray(logits).dtype
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, np.zeros_like(z, dtype=out_dtype)
    zmax = z.max(axis=1, keepdims=True)
    logsumexp = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    picked = np.take_along_axis(logp, np.clip(tgt, 0, z.shape[1] - 1)[:, None], axis=1)[:, 0]
    loss = -picked[valid].sum() / n_valid
    onehot = np.zeros_like(z)
    np.put_along_axis(onehot, np.clip(tgt, 0, z.shape[1] - 1)[:, None], 1.0, axis=1)
    grad = (np.exp(logp) - onehot) * valid[:, None] / n_valid
    return float(loss), grad.astype(out_dtype)


def loss_smooth_l1(pred: Array, target: Array, valid_mask: Array, beta: float = 1.0):
    """Huber-style loss on (n, C, h, w) predictions over cells where valid_mask is set."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ConfigurationError(f"smooth_l1 shapes differ: {p.shape} vs {t.shape}")
    valid = np.asarray(valid_mask).astype(bool)
    if valid.shape != (p.shape[0],) + p.shape[2:]:
        raise ConfigurationError("valid mask must be (n,h,w) matching predictions")
    out_dtype = np.asarray(pred).dtype
    n_entries = int(valid.sum()) * p.shape[1]
    if n_entries == 0:
        return 0.0, np.zeros_like(p, dtype=out_dtype)
    d = p - t
    ad = np.abs(d)
    per = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    vm = valid[:, None]
    loss = (per * vm).sum() / n_entries
    grad = np.clip(d / beta, -1.0, 1.0) * vm / n_entries
    return float(loss), grad.astype(out_dtype)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_step(params, cfg: OptimizerConfig) -> None:
    """SGD with momentum and weight decay; zeroes gradients afterwards.

    v <- momentum * v + grad + weight_decay * w ;  w <- w - lr * v
    """
    if isinstance(params, LayerParams):
        params = [params]
    lr, mom, wd = FLOAT(cfg.learning_rate), FLOAT(cfg.momentum), FLOAT(cfg.weight_decay)
    for p in params:
        for w, g, v in ((p.weights, p.grad_weights, p.vel_weights),
                        (p.bias, p.grad_bias, p.vel_bias)):
            v *= mom
            v += g + wd * w
            w -= lr * v
        p.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference gradient checker
# ---------------------------------------------------------------------------

def grad_check(forward, backward, x: Array, *, epsilon: float = 1e-3,
               grad_out: Array | None = None, exclude: Array | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic backward and central differences.

    ``forward(x)`` maps an array to an array; ``backward(x, grad_out)`` must
    return d(sum(forward(x) * grad_out))/dx.  The op is driven at float64 (all
    ops follow their input dtype) so the epsilon-sized differences are not
    drowned by float32 output quantization; the relative-error denominator is
    max(|analytic|, |numeric|, 1e-8).  Entries flagged in ``exclude`` (same
    shape as x) are skipped.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.asarray(forward(x))
    if grad_out is None:
        rng = rng or np.random.default_rng(0)
        grad_out = rng.standard_normal(y.shape)
    grad_out64 = np.asarray(grad_out, dtype=np.float64)
    analytic = np.asarray(backward(x, grad_out64), dtype=np.float64).reshape(-1)
    skip = np.zeros(x.size, dtype=bool) if exclude is None else np.asarray(exclude).astype(bool).reshape(-1)
    flat = x.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        if skip[i]:
            continue
        orig = flat[i]
        xp = x.copy()
        xp.reshape(-1)[i] = orig + epsilon
        xm = x.copy()
        xm.reshape(-1)[i] = orig - epsilon
        step = float(xp.reshape(-1)[i]) - float(xm.reshape(-1)[i])
        if step == 0.0:
            continue
        fp = float((np.asarray(forward(xp), dtype=np.float64) * grad_out64).sum())
        fm = float((np.asarray(forward(xm), dtype=np.float64) * grad_out64).sum())
        numeric = (fp - fm) / step
        a = float(analytic[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
