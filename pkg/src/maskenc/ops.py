"""Dense-tensor operations with exact reverse-mode gradients.

Every operation is a pure function of ndarrays (float64, row-major): a
forward, and where it matters a matching backward that returns analytic
gradients with respect to each input. There is no graph, no tape --
composites wire backwards together by hand. All backwards are verified
against central finite differences (see maskenc.gradcheck).
"""

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an operation's contract."""


def _require(cond, msg):
    if not cond:
        raise ShapeError(msg)


@dataclass
class ConvParams:
    """Kernels and bias of one convolution layer.

    kernels: (c_out, c_in, k, k) with k odd and square (same-size
    zero-padded output needs an odd kernel); bias: (c_out,).
    """

    kernels: np.ndarray
    bias: np.ndarray
    bias_enabled: bool = True

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        _require(self.kernels.ndim == 4, f"kernels must be 4-d, got {self.kernels.shape}")
        c_out, _, kh, kw = self.kernels.shape
        _require(kh == kw, f"kernels must be square, got {kh}x{kw}")
        _require(kh % 2 == 1, f"kernel extent must be odd, got {kh}")
        _require(self.bias.shape == (c_out,),
                 f"bias shape {self.bias.shape} != ({c_out},)")

    @property
    def kernel_size(self):
        return self.kernels.shape[2]


def _im2col(xp, k, h_out, w_out):
    # (C, Hp, Wp) padded input -> (C*k*k, h_out*w_out) patch matrix
    c = xp.shape[0]
    cols = np.empty((c, k, k, h_out, w_out), dtype=np.float64)
    for u in range(k):
        for v in range(k):
            cols[:, u, v] = xp[:, u:u + h_out, v:v + w_out]
    return cols.reshape(c * k * k, h_out * w_out)


def _col2im(cols, c, k, h_out, w_out, hp, wp):
    # scatter-add transpose of _im2col
    cols = cols.reshape(c, k, k, h_out, w_out)
    xp = np.zeros((c, hp, wp), dtype=np.float64)
    for u in range(k):
        for v in range(k):
            xp[:, u:u + h_out, v:v + w_out] += cols[:, u, v]
    return xp


def _conv_out_shape(x, params, pad):
    c_in, h, w = x.shape
    k = params.kernel_size
    _require(pad >= 0, f"pad must be >= 0, got {pad}")
    _require(c_in == params.kernels.shape[1],
             f"input has {c_in} channels, kernels expect {params.kernels.shape[1]}")
    h_out = h + 2 * pad - k + 1
    w_out = w + 2 * pad - k + 1
    _require(h_out >= 1 and w_out >= 1,
             f"kernel {k}x{k} with pad {pad} does not fit input {h}x{w}")
    return h_out, w_out


def conv2d_forward(x, params, pad):
    """Cross-correlation of (c_in, h, w) with ConvParams at stride 1.

    Output is (c_out, h + 2*pad - k + 1, w + 2*pad - k + 1); bias is added
    per output channel when enabled.
    """
    x = np.asarray(x, dtype=np.float64)
    _require(x.ndim == 3, f"input must be (c, h, w), got {x.shape}")
    h_out, w_out = _conv_out_shape(x, params, pad)
    k = params.kernel_size
    c_out = params.kernels.shape[0]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, k, h_out, w_out)
    y = (params.kernels.reshape(c_out, -1) @ cols).reshape(c_out, h_out, w_out)
    if params.bias_enabled:
        y += params.bias[:, None, None]
    return y


def conv2d_backward(x, params, pad, grad_out):
    """Gradients of conv2d_forward: (grad_x, grad_kernels, grad_bias).

    grad_bias is all zeros when the bias is disabled.
    """
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    h_out, w_out = _conv_out_shape(x, params, pad)
    c_out = params.kernels.shape[0]
    _require(grad_out.shape == (c_out, h_out, w_out),
             f"grad_out shape {grad_out.shape} != ({c_out}, {h_out}, {w_out})")
    k = params.kernel_size
    c_in, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, k, h_out, w_out)
    g = grad_out.reshape(c_out, -1)
    grad_kernels = (g @ cols.T).reshape(params.kernels.shape)
    if params.bias_enabled:
        grad_bias = grad_out.sum(axis=(1, 2))
    else:
        grad_bias = np.zeros(c_out, dtype=np.float64)
    grad_cols = params.kernels.reshape(c_out, -1).T @ g
    grad_xp = _col2im(grad_cols, c_in, k, h_out, w_out, h + 2 * pad, w + 2 * pad)
    grad_x = grad_xp[:, pad:pad + h, pad:pad + w]
    return grad_x, grad_kernels, grad_bias


def fc_forward(x, weight, bias):
    """y = weight @ x + bias for x (d_in,), weight (d_out, d_in), bias (d_out,)."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    _require(x.ndim == 1 and weight.ndim == 2,
             f"fc expects vector and matrix, got {x.shape}, {weight.shape}")
    _require(weight.shape[1] == x.shape[0],
             f"weight takes {weight.shape[1]} inputs, x has {x.shape[0]}")
    _require(bias.shape == (weight.shape[0],),
             f"bias shape {bias.shape} != ({weight.shape[0]},)")
    return weight @ x + bias


def fc_backward(x, weight, grad_out):
    """Gradients of fc_forward: (grad_x, grad_weight, grad_bias)."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    _require(grad_out.shape == (weight.shape[0],),
             f"grad_out shape {grad_out.shape} != ({weight.shape[0]},)")
    _require(weight.shape[1] == x.shape[0],
             f"weight takes {weight.shape[1]} inputs, x has {x.shape[0]}")
    grad_x = weight.T @ grad_out
    grad_weight = np.outer(grad_out, x)
    grad_bias = grad_out.copy()
    return grad_x, grad_weight, grad_bias


def relu_forward(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x, grad_out):
    # subgradient at 0 is 0
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    _require(x.shape == grad_out.shape,
             f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    return np.where(x > 0.0, grad_out, 0.0)


def global_max_pool(x):
    """Per-channel spatial maximum of (c, h, w).

    Returns (values (c,), argmax (c,)) where argmax is the smallest
    row-major linear index attaining each channel's maximum, making the
    backward routing deterministic under ties.
    """
    x = np.asarray(x, dtype=np.float64)
    _require(x.ndim == 3, f"expected (c, h, w), got {x.shape}")
    _require(x.shape[1] >= 1 and x.shape[2] >= 1, "spatial extent must be >= 1")
    flat = x.reshape(x.shape[0], -1)
    argmax = np.argmax(flat, axis=1)
    values = flat[np.arange(x.shape[0]), argmax]
    return values, argmax


def global_max_pool_backward(x_shape, argmax, grad_values):
    """Route each channel's upstream gradient to its argmax position."""
    c, h, w = x_shape
    grad_values = np.asarray(grad_values, dtype=np.float64)
    _require(grad_values.shape == (c,),
             f"grad_values shape {grad_values.shape} != ({c},)")
    grad = np.zeros((c, h * w), dtype=np.float64)
    grad[np.arange(c), argmax] = grad_values
    return grad.reshape(c, h, w)


def max_pool2x2(x):
    """2x2/stride-2 max pooling of (c, h, w); h and w must be even."""
    x = np.asarray(x, dtype=np.float64)
    c, h, w = x.shape
    _require(h % 2 == 0 and w % 2 == 0, f"spatial dims must be even, got {h}x{w}")
    windows = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4)
    return windows.reshape(c, h // 2, w // 2, 4).max(axis=-1)


def max_pool2x2_backward(x, grad_out):
    """Route gradients to each window's first (row-major) maximum."""
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    c, h, w = x.shape
    _require(grad_out.shape == (c, h // 2, w // 2),
             f"grad_out shape {grad_out.shape} != ({c}, {h // 2}, {w // 2})")
    windows = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4)
    windows = windows.reshape(c, h // 2, w // 2, 4)
    am = np.argmax(windows, axis=-1)
    grad_win = np.zeros_like(windows)
    np.put_along_axis(grad_win, am[..., None], grad_out[..., None], axis=-1)
    grad = grad_win.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4)
    return grad.reshape(c, h, w)


def softmax_cross_entropy(logits, label):
    """Negative log softmax probability of `label`, with its gradient.

    Computed with max subtraction for stability. Returns (loss, grad)
    where grad = softmax(logits) - onehot(label); grad entries sum to 0.
    """
    logits = np.asarray(logits, dtype=np.float64)
    _require(logits.ndim == 1, f"logits must be a vector, got {logits.shape}")
    k = logits.shape[0]
    if not 0 <= label < k:
        raise ValueError(f"label {label} out of range for {k} classes")
    z = logits - logits.max()
    log_norm = np.log(np.exp(z).sum())
    loss = log_norm - z[label]
    grad = np.exp(z - log_norm)
    grad[label] -= 1.0
    return loss, grad


def smooth_l1(pred, target):
    """Huber-style regression loss summed over coordinates.

    Per coordinate: 0.5*d^2 for |d| < 1, else |d| - 0.5, with d = pred -
    target. Returns (loss, grad_pred).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _require(pred.shape == target.shape,
             f"pred shape {pred.shape} != target shape {target.shape}")
    d = pred - target
    small = np.abs(d) < 1.0
    loss = float(np.sum(np.where(small, 0.5 * d * d, np.abs(d) - 0.5)))
    grad = np.where(small, d, np.sign(d))
    return loss, grad


def sgd_momentum_step(param, grad, velocity, lr, momentum=0.9, weight_decay=0.0005):
    """One SGD-with-momentum update; returns (new_param, new_velocity).

    v <- momentum*v + (grad + weight_decay*param); param <- param - lr*v.
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    velocity = np.asarray(velocity, dtype=np.float64)
    _require(param.shape == grad.shape == velocity.shape,
             f"mismatched shapes {param.shape}, {grad.shape}, {velocity.shape}")
    new_velocity = momentum * velocity + (grad + weight_decay * param)
    new_param = param - lr * new_velocity
    return new_param, new_velocity
