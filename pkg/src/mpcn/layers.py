"""Layer forward/backward passes and the SGD update rule.

Every layer is a small object that caches whatever its backward pass needs.
A layer instance belongs to one training context and is not shared between
threads; the arrays themselves are only read, never mutated, except by
`sgd_step`, which updates parameters in place inside that single context.

Convolutions run as im2col + one matrix product, which keeps the hot loop
inside BLAS.  All layers work in the dtype of their inputs/parameters, so
the same code serves float32 training and float64 gradient checking.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .errors import LabelError, ParameterError, ShapeError, StateError


def _normalize_pad(pad):
    """Pad spec -> (top, bottom, left, right)."""
    if isinstance(pad, (tuple, list)):
        if len(pad) != 4:
            raise ParameterError(f"pad tuple must be (top, bottom, left, right), got {pad}")
        return tuple(int(p) for p in pad)
    pad = int(pad)
    return (pad, pad, pad, pad)


def conv_output_size(size, kernel, stride, pad_a, pad_b):
    return (size + pad_a + pad_b - kernel) // stride + 1


def _im2col(x, kernel, stride):
    """(N,C,H,W) -> (N*OH*OW, C*k*k) patch matrix; x must already be padded."""
    n, c, h, w = x.shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    col = np.empty((n, c, kernel, kernel, oh, ow), dtype=x.dtype)
    for ky in range(kernel):
        y_max = ky + stride * oh
        for kx in range(kernel):
            x_max = kx + stride * ow
            col[:, :, ky, kx, :, :] = x[:, :, ky:y_max:stride, kx:x_max:stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, -1)


def _col2im(col, shape, kernel, stride):
    """Adjoint of `_im2col`: scatter-add patches back into (N,C,H,W)."""
    n, c, h, w = shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    col = col.reshape(n, oh, ow, c, kernel, kernel).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros(shape, dtype=col.dtype)
    for ky in range(kernel):
        y_max = ky + stride * oh
        for kx in range(kernel):
            x_max = kx + stride * ow
            img[:, :, ky:y_max:stride, kx:x_max:stride] += col[:, :, ky, kx, :, :]
    return img


class Conv2d:
    """Cross-correlation with per-channel bias.

    `pad` is an int (symmetric zero padding) or a (top, bottom, left, right)
    tuple; the 4-tuple form exists for the 224-pixel input mode, which needs
    asymmetric padding to land on the canonical 55x55 first feature map.
    """

    def __init__(self, in_channels, out_channels, kernel, stride=1, pad=0,
                 weights=None, bias=None, rng=None, init_std=0.01, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.pad = _normalize_pad(pad)
        if weights is not None:
            if weights.shape != (out_channels, in_channels, self.kernel, self.kernel):
                raise ShapeError(f"conv weights shape {weights.shape} inconsistent with "
                                 f"({out_channels},{in_channels},{self.kernel},{self.kernel})")
            self.weights = np.asarray(weights, dtype=dtype)
        else:
            if rng is None:
                raise ParameterError("Conv2d needs either explicit weights or an rng")
            self.weights = rng.standard_normal(
                (out_channels, in_channels, self.kernel, self.kernel), dtype=dtype) * dtype(init_std)
        self.bias = (np.zeros(out_channels, dtype=dtype) if bias is None
                     else np.asarray(bias, dtype=dtype))
        if self.bias.shape != (out_channels,):
            raise ShapeError(f"conv bias shape {self.bias.shape} != ({out_channels},)")
        self.grad_weights = None
        self.grad_bias = None
        self._cache = None

    def output_shape(self, h, w):
        pt, pb, pl, pr = self.pad
        oh = conv_output_size(h, self.kernel, self.stride, pt, pb)
        ow = conv_output_size(w, self.kernel, self.stride, pl, pr)
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv output {oh}x{ow} (input {h}x{w}, kernel {self.kernel}, "
                             f"stride {self.stride}, pad {self.pad}) must be >= 1")
        return oh, ow

    def forward(self, x):
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} input channels, got {c}")
        oh, ow = self.output_shape(h, w)
        pt, pb, pl, pr = self.pad
        if any(self.pad):
            x_pad = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        else:
            x_pad = x
        cols = _im2col(x_pad, self.kernel, self.stride)
        w_mat = self.weights.reshape(self.out_channels, -1).T
        out = tc.matmul(cols, w_mat) + self.bias
        self._cache = (cols, x.shape, x_pad.shape, oh, ow)
        return out.reshape(n, oh, ow, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, grad_out):
        if self._cache is None:
            raise StateError("conv backward before forward")
        cols, x_shape, pad_shape, oh, ow = self._cache
        n = x_shape[0]
        g2 = grad_out.transpose(0, 2, 3, 1).reshape(n * oh * ow, self.out_channels)
        self.grad_weights = tc.matmul(g2.T, cols).reshape(self.weights.shape)
        self.grad_bias = g2.sum(axis=0)
        dcols = tc.matmul(g2, self.weights.reshape(self.out_channels, -1))
        dx_pad = _col2im(dcols, pad_shape, self.kernel, self.stride)
        pt, pb, pl, pr = self.pad
        if any(self.pad):
            h, w = x_shape[2], x_shape[3]
            return dx_pad[:, :, pt:pt + h, pl:pl + w]
        return dx_pad

    def params(self):
        return {"weight": self.weights, "bias": self.bias}

    def grads(self):
        return {"weight": self.grad_weights, "bias": self.grad_bias}


class MaxPool2d:
    """Per-window max; backward routes each upstream gradient to the window's
    argmax position (lowest flat index on ties), accumulating across
    overlapping windows."""

    def __init__(self, kernel, stride):
        self.kernel = int(kernel)
        self.stride = int(stride)
        self._cache = None

    def output_shape(self, h, w):
        if self.kernel > h or self.kernel > w:
            raise ShapeError(f"pool kernel {self.kernel} larger than input {h}x{w}")
        oh = (h - self.kernel) // self.stride + 1
        ow = (w - self.kernel) // self.stride + 1
        return oh, ow

    def forward(self, x):
        n, c, h, w = x.shape
        k, s = self.kernel, self.stride
        oh, ow = self.output_shape(h, w)
        windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
        windows = windows[:, :, ::s, ::s].reshape(n, c, oh, ow, k * k)
        arg = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
        self._cache = (arg, x.shape, oh, ow)
        return out

    def backward(self, grad_out):
        if self._cache is None:
            raise StateError("pool backward before forward")
        arg, x_shape, oh, ow = self._cache
        n, c, h, w = x_shape
        k, s = self.kernel, self.stride
        wy, wx = arg // k, arg % k
        oy = np.arange(oh)[None, None, :, None] * s
        ox = np.arange(ow)[None, None, None, :] * s
        iy = oy + wy
        ix = ox + wx
        nc = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None])
        flat = (nc * h + iy) * w + ix
        dx = np.zeros(n * c * h * w, dtype=grad_out.dtype)
        np.add.at(dx, flat.ravel(), grad_out.ravel())
        return dx.reshape(x_shape)


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, grad_out):
        if self._mask is None:
            raise StateError("relu backward before forward")
        # gradient at exactly 0 is 0
        return grad_out * self._mask


@dataclass
class LrnParams:
    """Cross-channel response normalization hyperparameters.

    `size` is the channel window width (clipped at the channel bounds);
    the divisor is (k + alpha/size * sum of squares over the window)^beta.
    """
    size: int = 5
    k: float = 2.0
    alpha: float = 1e-4
    beta: float = 0.75

    def __post_init__(self):
        if self.size < 1 or self.k <= 0 or self.alpha < 0 or self.beta <= 0:
            raise ParameterError(f"invalid LRN parameters {self}")


class Lrn:
    """Local response normalization across feature maps."""

    def __init__(self, params=None):
        self.p = params or LrnParams()
        self._cache = None

    def _window_sum(self, t, lo_off, hi_off):
        # sum over channels [c - lo_off, c + hi_off], clipped to bounds
        c = t.shape[1]
        cs = np.concatenate([np.zeros_like(t[:, :1]), np.cumsum(t, axis=1)], axis=1)
        hi = np.minimum(c, np.arange(c) + hi_off + 1)
        lo = np.maximum(0, np.arange(c) - lo_off)
        return cs[:, hi] - cs[:, lo]

    def forward(self, x):
        p = self.p
        lo, hi = (p.size - 1) // 2, p.size // 2
        s = self._window_sum(x * x, lo, hi)
        denom = x.dtype.type(p.k) + x.dtype.type(p.alpha / p.size) * s
        scale = denom ** x.dtype.type(-p.beta)
        self._cache = (x, denom, scale)
        return x * scale

    def backward(self, grad_out):
        if self._cache is None:
            raise StateError("lrn backward before forward")
        x, denom, scale = self._cache
        p = self.p
        lo, hi = (p.size - 1) // 2, p.size // 2
        # d out[c] / d x[j] couples every channel whose window covers j,
        # i.e. the transposed window [j - hi, j + lo]
        inner = grad_out * x * denom ** x.dtype.type(-p.beta - 1)
        coupled = self._window_sum(inner, hi, lo)
        coef = x.dtype.type(2.0 * p.beta * p.alpha / p.size)
        return grad_out * scale - coef * x * coupled


class FullyConnected:
    def __init__(self, in_features, out_features, weights=None, bias=None,
                 rng=None, init_std=0.01, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        if weights is not None:
            if weights.shape != (in_features, out_features):
                raise ShapeError(f"fc weights shape {weights.shape} != ({in_features},{out_features})")
            self.weights = np.asarray(weights, dtype=dtype)
        else:
            if rng is None:
                raise ParameterError("FullyConnected needs either explicit weights or an rng")
            self.weights = rng.standard_normal((in_features, out_features), dtype=dtype) * dtype(init_std)
        self.bias = (np.zeros(out_features, dtype=dtype) if bias is None
                     else np.asarray(bias, dtype=dtype))
        self.grad_weights = None
        self.grad_bias = None
        self._x = None

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"fc expects (N,{self.in_features}) input, got {x.shape}")
        self._x = x
        return tc.matmul(x, self.weights) + self.bias

    def backward(self, grad_out):
        if self._x is None:
            raise StateError("fc backward before forward")
        self.grad_weights = tc.matmul(self._x.T, grad_out)
        self.grad_bias = grad_out.sum(axis=0)
        return tc.matmul(grad_out, self.weights.T)

    def params(self):
        return {"weight": self.weights, "bias": self.bias}

    def grads(self):
        return {"weight": self.grad_weights, "bias": self.grad_bias}


class Dropout:
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time so
    inference is a plain identity pass."""

    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise ParameterError(f"dropout rate {rate} outside [0, 1)")
        self.rate = float(rate)
        self._mask = None

    def forward(self, x, mode="train", rng=None):
        if mode not in ("train", "infer"):
            raise ParameterError(f"unknown dropout mode {mode!r}")
        if mode == "infer" or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise StateError("train-mode dropout needs a seed stream")
        keep = rng.random(x.shape) >= self.rate
        self._mask = keep.astype(x.dtype) / x.dtype.type(1.0 - self.rate)
        return x * self._mask

    def backward(self, grad_out):
        if self._mask is None:
            return grad_out
        return grad_out * self._mask


class ConcatFlatten:
    """Flatten each input per sample and concatenate along the feature axis."""

    def __init__(self):
        self._shapes = None

    def forward(self, *tensors):
        if not tensors:
            raise ShapeError("concat of zero tensors")
        first = tensors[0].shape
        for t in tensors[1:]:
            if t.shape != first:
                raise ShapeError(f"concat inputs disagree: {first} vs {t.shape}")
        n = first[0]
        self._shapes = [t.shape for t in tensors]
        if len(tensors) == 1:
            return tensors[0].reshape(n, -1)
        return np.concatenate([t.reshape(n, -1) for t in tensors], axis=1)

    def backward(self, grad_out):
        if self._shapes is None:
            raise StateError("concat backward before forward")
        n = self._shapes[0][0]
        widths = [int(np.prod(s[1:])) for s in self._shapes]
        out, offset = [], 0
        for shape, width in zip(self._shapes, widths):
            out.append(grad_out[:, offset:offset + width].reshape(shape))
            offset += width
        return tuple(out)


class SoftmaxLogLoss:
    """Row-stable softmax + mean negative log-likelihood of the labels."""

    def __init__(self):
        self._cache = None

    def forward(self, logits, labels=None):
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        probs = exp / exp.sum(axis=1, keepdims=True)
        if labels is None:
            self._cache = None
            return probs, None
        labels = np.asarray(labels)
        k = logits.shape[1]
        if labels.min() < 0 or labels.max() >= k:
            raise LabelError(f"labels outside [0, {k})")
        n = logits.shape[0]
        loss = float(-np.log(probs[np.arange(n), labels]).mean())
        self._cache = (probs, labels)
        return probs, loss

    def backward(self):
        if self._cache is None:
            raise StateError("loss backward before forward with labels")
        probs, labels = self._cache
        n = probs.shape[0]
        grad = probs.copy()
        grad[np.arange(n), labels] -= probs.dtype.type(1.0)
        return grad / probs.dtype.type(n)


@dataclass
class SgdState:
    """Momentum SGD with decoupled-from-nothing classic weight decay:

        v <- momentum * v - lr * (grad + weight_decay * param)
        param <- param + v
    """
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ParameterError(f"learning rate {self.learning_rate} must be >= 0")


def sgd_step(params, grads, state):
    """Update every parameter in place; velocities are created lazily."""
    for name, param in params.items():
        grad = grads[name]
        if grad.shape != param.shape:
            raise ShapeError(f"grad shape {grad.shape} != param shape {param.shape} for {name}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(param)
            state.velocity[name] = v
        elif v.shape != param.shape:
            raise ShapeError(f"velocity shape {v.shape} != param shape {param.shape} for {name}")
        lr = param.dtype.type(state.learning_rate)
        step = grad + param.dtype.type(state.weight_decay) * param
        v *= param.dtype.type(state.momentum)
        v -= lr * step
        param += v
