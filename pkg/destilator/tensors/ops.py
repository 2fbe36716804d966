import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    NonFiniteValue,
    ShapeError,
    Tensor,
    current_tape,
    is_recording,
)

OPS = {}


def register(name):
    def decorator(function):
        OPS[name] = function
        return function

    return decorator


def forward_op(op_kind, inputs, attrs=None):
    """Izvede operacijo iz registra po imenu, npr. forward_op("relu", [x])."""
    try:
        op = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    return op(*inputs, **(attrs or {}))


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def result(op, data, inputs, backward_rule):
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NonFiniteValue(f"{op} produced non-finite values")
    needs_grad = is_recording() and any(tensor.requires_grad for tensor in inputs)
    output = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        current_tape().record(op, inputs, output, backward_rule)
    return output


def unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} cannot be broadcast together"
        ) from None


# Elementwise


@register("add")
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return result(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


@register("sub")
def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return result(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


@register("mul")
def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return result(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


@register("div")
def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    return result(
        "div",
        a.data / b.data,
        (a, b),
        lambda g: (
            unbroadcast(g / b.data, a.shape),
            unbroadcast(-g * a.data / b.data**2, b.shape),
        ),
    )


@register("neg")
def neg(a):
    return result("neg", -a.data, (a,), lambda g: (-g,))


@register("power")
def power(a, exponent):
    a = as_tensor(a)
    return result(
        "power",
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
    )


@register("exp")
def exp(a):
    out = np.exp(a.data)
    return result("exp", out, (a,), lambda g: (g * out,))


@register("log")
def log(a):
    return result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


@register("sqrt")
def sqrt(a):
    out = np.sqrt(a.data)
    return result("sqrt", out, (a,), lambda g: (g / (2 * out),))


@register("relu")
def relu(a):
    positive = a.data > 0
    return result("relu", np.maximum(a.data, 0), (a,), lambda g: (g * positive,))


_GELU_C = math.sqrt(2 / math.pi)


@register("gelu")
def gelu(a):
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))

    def backward_rule(g):
        dt = (1 - t**2) * _GELU_C * (1 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1 + t) + 0.5 * x * dt),)

    return result("gelu", 0.5 * x * (1 + t), (a,), backward_rule)


# Reductions and shape


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        g = np.expand_dims(g, tuple(ax % len(shape) for ax in axes))
    return np.broadcast_to(g, shape)


@register("sum")
def sum(a, axis=None, keepdims=False):
    return result(
        "sum",
        np.sum(a.data, axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims),),
    )


@register("mean")
def mean(a, axis=None, keepdims=False):
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.size // max(out.size, 1)
    return result(
        "mean",
        out,
        (a,),
        lambda g: (_expand_reduced(g / count, a.shape, axis, keepdims),),
    )


@register("reshape")
def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


@register("transpose")
def transpose(a, axes=None):
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return result(
        "transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),)
    )


@register("index")
def index(a, key):
    def backward_rule(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, key, g)
        return (grad,)

    return result("index", a.data[key], (a,), backward_rule)


# Linear algebra


@register("matmul")
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: cannot multiply {a.shape} by {b.shape}"
            f" (inner dims {a.shape[-1:]} vs {b.shape[-2:-1]})"
        )

    def backward_rule(g):
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        grad_b = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)

    return result("matmul", a.data @ b.data, (a, b), backward_rule)


# Softmax family


def _softmax(x, axis):
    shifted = np.exp(x - x.max(axis=axis, keepdims=True))
    return shifted / shifted.sum(axis=axis, keepdims=True)


@register("softmax")
def softmax(a, axis=-1):
    out = _softmax(a.data, axis)
    return result(
        "softmax",
        out,
        (a,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
    )


@register("log_softmax")
def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return result(
        "log_softmax",
        out,
        (a,),
        lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),),
    )


@register("cross_entropy")
def cross_entropy(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: logits {logits.shape} do not match labels {labels.shape}"
        )
    rows = np.arange(len(labels))
    probabilities = _softmax(logits.data, axis=1)
    loss = -np.mean(np.log(probabilities[rows, labels]))

    def backward_rule(g):
        grad = probabilities.copy()
        grad[rows, labels] -= 1
        return (g * grad / len(labels),)

    return result("cross_entropy", loss, (logits,), backward_rule)


@register("l2_normalize")
def l2_normalize(a, axis=-1, eps=1e-12):
    norm = np.maximum(np.sqrt((a.data**2).sum(axis=axis, keepdims=True)), eps)
    out = a.data / norm
    return result(
        "l2_normalize",
        out,
        (a,),
        lambda g: ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,),
    )


# Convolution


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def conv_windows(x_padded, kernel_h, kernel_w, stride):
    """Pogled (N, C, Ho, Wo, kh, kw) na vsa okna vhodne slike, brez kopiranja."""
    windows = np.lib.stride_tricks.sliding_window_view(
        x_padded, (kernel_h, kernel_w), axis=(2, 3)
    )
    return windows[:, :, ::stride, ::stride]


def check_conv_shapes(op, x, weight, bias, stride):
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(
            f"{op}: expected 4-d input and kernel, got {x.shape} and {weight.shape}"
        )
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"{op}: input has {x.shape[1]} channels but kernel expects {weight.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"{op}: bias of shape {bias.shape} does not match {weight.shape[0]} output channels"
        )
    if stride < 1:
        raise ShapeError(f"{op}: stride must be positive, got {stride}")


def scatter_windows(grad_windows, padded_shape, stride, positions=None):
    """Vrne gradient razširjenega vhoda iz gradientov posameznih oken."""
    grad = np.zeros(padded_shape)
    kernel_h, kernel_w = grad_windows.shape[-2:]
    if positions is None:
        # grad_windows: (N, C, Ho, Wo, kh, kw)
        out_h, out_w = grad_windows.shape[2:4]
        for i in range(kernel_h):
            for j in range(kernel_w):
                grad[
                    :,
                    :,
                    i : i + stride * out_h : stride,
                    j : j + stride * out_w : stride,
                ] += grad_windows[:, :, :, :, i, j]
    else:
        # grad_windows: (V, C, kh, kw), za vsak položaj ločeno
        n, rows, cols = positions
        for i in range(kernel_h):
            for j in range(kernel_w):
                grad[n, :, rows * stride + i, cols * stride + j] += grad_windows[
                    :, :, i, j
                ]
    return grad


@register("conv2d")
def conv2d(x, weight, bias=None, stride=1, padding=0):
    check_conv_shapes("conv2d", x, weight, bias, stride)
    batch, channels, height, width = x.shape
    out_channels, _, kernel_h, kernel_w = weight.shape
    out_h = conv_output_size(height, kernel_h, stride, padding)
    out_w = conv_output_size(width, kernel_w, stride, padding)
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv2d: kernel {weight.shape[2:]} does not fit input {x.shape[2:]}"
            f" with padding {padding}"
        )
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    x_padded = np.pad(x.data, pad)
    windows = conv_windows(x_padded, kernel_h, kernel_w, stride)
    columns = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * out_h * out_w, -1)
    kernel = weight.data.reshape(out_channels, -1)
    out = columns @ kernel.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(batch, out_h, out_w, out_channels).transpose(0, 3, 1, 2)

    def backward_rule(g):
        flat = g.transpose(0, 2, 3, 1).reshape(-1, out_channels)
        grad_weight = (flat.T @ columns).reshape(weight.shape)
        grad_columns = (flat @ kernel).reshape(
            batch, out_h, out_w, channels, kernel_h, kernel_w
        )
        grad_padded = scatter_windows(
            grad_columns.transpose(0, 3, 1, 2, 4, 5), x_padded.shape, stride
        )
        grad_x = grad_padded[:, :, padding : padding + height, padding : padding + width]
        grads = [grad_x, grad_weight]
        if bias is not None:
            grads.append(flat.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return result("conv2d", out, inputs, backward_rule)


# Pooling and resampling


@register("mean_pool")
def mean_pool(x, kernel):
    batch, channels, height, width = x.shape
    if height % kernel or width % kernel:
        raise ShapeError(f"mean_pool: {x.shape[2:]} is not divisible by {kernel}")
    out = x.data.reshape(
        batch, channels, height // kernel, kernel, width // kernel, kernel
    ).mean(axis=(3, 5))
    return result(
        "mean_pool",
        out,
        (x,),
        lambda g: (np.repeat(np.repeat(g, kernel, 2), kernel, 3) / kernel**2,),
    )


@register("upsample_nearest")
def upsample_nearest(x, factor=2):
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest: expected 4-d input, got {x.shape}")
    batch, channels, height, width = x.shape
    out = np.repeat(np.repeat(x.data, factor, 2), factor, 3)
    return result(
        "upsample_nearest",
        out,
        (x,),
        lambda g: (
            g.reshape(batch, channels, height, factor, width, factor).sum(axis=(3, 5)),
        ),
    )


# Normalization


@dataclass
class BatchNormState:
    """Tekoče statistike paketne normalizacije in način (učenje/vrednotenje)."""

    channels: int
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels)
        if self.running_var is None:
            self.running_var = np.ones(self.channels)


@register("batch_norm")
def batch_norm(x, gamma, beta, state: BatchNormState, mask=None):
    """
    Paketna normalizacija po kanalih. Neobvezna maska (N, H, W) določa položaje,
    ki štejejo v statistiko; maskirani položaji na izhodu ostanejo 0.
    """
    if x.ndim not in (2, 4) or x.shape[1] != state.channels:
        raise ShapeError(
            f"batch_norm: input {x.shape} does not have {state.channels} channels"
        )
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    if mask is None:
        weights = np.ones((x.shape[0], 1) + x.shape[2:])
    else:
        weights = np.asarray(mask, dtype=np.float64)[:, None]
        if weights.shape != (x.shape[0], 1) + x.shape[2:]:
            raise ShapeError(
                f"batch_norm: mask {np.shape(mask)} does not match input {x.shape}"
            )
    shape = (1, -1) + (1,) * (x.ndim - 2)
    gamma_b = gamma.data.reshape(shape)
    beta_b = beta.data.reshape(shape)

    if state.training:
        count = weights.sum()
        if count == 0:
            raise ValueError("batch_norm: no positions to normalize over")
        mu = (weights * x.data).sum(axis=axes, keepdims=True) / count
        centered = (x.data - mu) * weights
        var = (centered**2).sum(axis=axes, keepdims=True) / count
        inv_std = 1 / np.sqrt(var + state.eps)
        x_hat = centered * inv_std
        unbiased = var * count / (count - 1) if count > 1 else var
        state.running_mean = (1 - state.momentum) * state.running_mean + (
            state.momentum * mu.reshape(-1)
        )
        state.running_var = (1 - state.momentum) * state.running_var + (
            state.momentum * unbiased.reshape(-1)
        )

        def grad_x(g):
            grad_hat = g * weights * gamma_b
            return (
                weights
                * inv_std
                * (
                    grad_hat
                    - grad_hat.sum(axis=axes, keepdims=True) / count
                    - x_hat * (grad_hat * x_hat).sum(axis=axes, keepdims=True) / count
                )
            )

    else:
        inv_std = 1 / np.sqrt(state.running_var.reshape(shape) + state.eps)
        x_hat = (x.data - state.running_mean.reshape(shape)) * inv_std * weights

        def grad_x(g):
            return g * weights * gamma_b * inv_std

    out = (gamma_b * x_hat + beta_b) * weights

    def backward_rule(g):
        masked = g * weights
        return (
            grad_x(g),
            (masked * x_hat).sum(axis=axes),
            masked.sum(axis=axes),
        )

    return result("batch_norm", out, (x, gamma, beta), backward_rule)


@register("layer_norm")
def layer_norm(x, gamma, beta, eps=1e-5):
    if x.shape[-1] != gamma.shape[-1]:
        raise ShapeError(
            f"layer_norm: last dim {x.shape[-1]} does not match {gamma.shape[-1]}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    size = x.shape[-1]

    def backward_rule(g):
        grad_hat = g * gamma.data
        grad_x = inv_std * (
            grad_hat
            - grad_hat.sum(axis=-1, keepdims=True) / size
            - x_hat * (grad_hat * x_hat).sum(axis=-1, keepdims=True) / size
        )
        reduce_axes = tuple(range(x.ndim - 1))
        return (
            grad_x,
            (g * x_hat).sum(axis=reduce_axes),
            g.sum(axis=reduce_axes),
        )

    return result(
        "layer_norm", gamma.data * x_hat + beta.data, (x, gamma, beta), backward_rule
    )
