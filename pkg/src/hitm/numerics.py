"""Dense float64 primitives with explicit forward and backward passes.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. Image-like tensors are ``C x H x W``; every primitive here also accepts a
leading batch axis (``B x C x H x W``) so the trainer can run minibatches.
No broadcasting is performed between operands: shapes must match exactly.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


def as_tensor(x):
    """Return ``x`` as a contiguous float64 array (no copy if already one)."""
    return np.ascontiguousarray(x, dtype=DTYPE)


def _batched(x, name="input"):
    x = as_tensor(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"{name} must be CxHxW or BxCxHxW, got shape {x.shape}")


def conv_output_size(size, k, stride, pad):
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ValueError(
            f"non-integral conv output: (size {size} + 2*pad {pad} - k {k}) / stride {stride}"
        )
    return span // stride + 1


def _check_conv_args(x, kernels, bias, stride, pad):
    if stride < 1 or int(stride) != stride:
        raise ValueError(f"stride must be a positive int, got {stride}")
    if pad < 0 or int(pad) != pad:
        raise ValueError(f"pad must be a non-negative int, got {pad}")
    if kernels.ndim != 4:
        raise ValueError(f"kernels must be C_out x C_in x kH x kW, got shape {kernels.shape}")
    c_out, c_in, kh, kw = kernels.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {kh}x{kw}")
    if x.shape[1] != c_in:
        raise ValueError(f"input has {x.shape[1]} channels but kernels expect {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"bias must have shape ({c_out},), got {bias.shape}")
    return (conv_output_size(x.shape[2], kh, stride, pad),
            conv_output_size(x.shape[3], kw, stride, pad))


def _im2col(x, kh, kw, stride, pad):
    # (B, C, Hp, Wp) -> (B*H'*W', C*kh*kw)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d_forward(x, kernels, bias, stride=1, pad=0):
    """Cross-correlation with zero padding.

    ``x`` is ``C_in x H x W`` (or batched), ``kernels`` is
    ``C_out x C_in x kH x kW`` and ``bias`` is ``C_out``.
    """
    x, squeeze = _batched(x)
    kernels = as_tensor(kernels)
    bias = as_tensor(bias)
    _check_conv_args(x, kernels, bias, stride, pad)
    c_out, _, kh, kw = kernels.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    out = cols @ kernels.reshape(c_out, -1).T + bias
    out = np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, c_out).transpose(0, 3, 1, 2))
    return out[0] if squeeze else out


def conv2d_backward(grad_out, saved_input, kernels, stride=1, pad=0):
    """Gradients of :func:`conv2d_forward` w.r.t. input, kernels and bias."""
    x, squeeze = _batched(saved_input, "saved_input")
    g, _ = _batched(grad_out, "grad_out")
    kernels = as_tensor(kernels)
    ho, wo = _check_conv_args(x, kernels, None, stride, pad)
    c_out, c_in, kh, kw = kernels.shape
    if g.shape != (x.shape[0], c_out, ho, wo):
        raise ValueError(
            f"grad_out shape {g.shape} does not match forward output {(x.shape[0], c_out, ho, wo)}"
        )
    b = x.shape[0]
    cols, _, _ = _im2col(x, kh, kw, stride, pad)
    g_flat = g.transpose(0, 2, 3, 1).reshape(-1, c_out)

    grad_bias = g_flat.sum(axis=0)
    grad_kernels = (g_flat.T @ cols).reshape(kernels.shape)

    dcols = (g_flat @ kernels.reshape(c_out, -1)).reshape(b, ho, wo, c_in, kh, kw)
    hp, wp = x.shape[2] + 2 * pad, x.shape[3] + 2 * pad
    dxp = np.zeros((b, c_in, hp, wp), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    grad_input = dxp[:, :, pad:hp - pad, pad:wp - pad] if pad else dxp
    grad_input = np.ascontiguousarray(grad_input)
    if squeeze:
        grad_input = grad_input[0]
    return grad_input, grad_kernels, grad_bias


def leaky_relu_forward(x, slope=0.1):
    x = as_tensor(x)
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(grad_out, x, slope=0.1):
    if np.shape(grad_out) != np.shape(x):
        raise ValueError(f"grad_out shape {np.shape(grad_out)} != input shape {np.shape(x)}")
    return np.where(as_tensor(x) > 0, grad_out, slope * as_tensor(grad_out))


def sigmoid_forward(x):
    x = as_tensor(x)
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out, out):
    """``out`` is the saved forward output."""
    if np.shape(grad_out) != np.shape(out):
        raise ValueError(f"grad_out shape {np.shape(grad_out)} != output shape {np.shape(out)}")
    return as_tensor(grad_out) * out * (1.0 - out)


def softmax_forward(x, axis=-1):
    x = as_tensor(x)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax_backward(grad_out, out, axis=-1):
    if np.shape(grad_out) != np.shape(out):
        raise ValueError(f"grad_out shape {np.shape(grad_out)} != output shape {np.shape(out)}")
    grad_out = as_tensor(grad_out)
    return out * (grad_out - (grad_out * out).sum(axis=axis, keepdims=True))


def _pool_windows(x):
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    return x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        b, c, h // 2, w // 2, 4)


def maxpool2_forward(x):
    """2x2 max pooling with stride 2."""
    x, squeeze = _batched(x)
    out = _pool_windows(x).max(axis=-1)
    return out[0] if squeeze else out


def maxpool2_backward(grad_out, x):
    """Route ``grad_out`` to the first maximal element of each window of ``x``."""
    x, squeeze = _batched(x)
    g, _ = _batched(grad_out, "grad_out")
    b, c, h, w = x.shape
    if g.shape != (b, c, h // 2, w // 2):
        raise ValueError(f"grad_out shape {g.shape} does not match pooled shape {(b, c, h // 2, w // 2)}")
    arg = _pool_windows(x).argmax(axis=-1)
    onehot = arg[..., None] == np.arange(4)
    dwin = onehot * g[..., None]
    dx = dwin.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
    dx = np.ascontiguousarray(dx, dtype=DTYPE)
    return dx[0] if squeeze else dx


def finite_difference_check(f, x, h=1e-4, coords=None, value_fn=None):
    """Compare the analytic gradient of ``f`` with central differences.

    ``f(x)`` must return ``(value, grad)`` where ``value`` is a scalar and
    ``grad`` has the shape of ``x``. ``coords`` optionally restricts the
    check to a sequence of flat indices (the full sweep is used otherwise).
    ``value_fn``, if given, computes the scalar alone for the perturbed
    evaluations, which saves a backward pass per probe.

    Returns the max over checked coordinates of
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    x = as_tensor(x).copy()
    value, grad = f(x)
    grad = as_tensor(grad)
    if grad.shape != x.shape:
        raise ValueError(f"gradient shape {grad.shape} != input shape {x.shape}")
    if not (np.isfinite(value) and np.all(np.isfinite(grad))):
        raise ValueError("f returned a non-finite value or gradient at x")
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    if value_fn is None:
        def value_fn(z):
            return f(z)[0]
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = value_fn(x)
        flat[i] = orig - h
        fm = value_fn(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"f is non-finite at coordinate {i} +/- {h}")
        numeric = (fp - fm) / (2.0 * h)
        analytic = gflat[i]
        err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
        worst = max(worst, err)
    return worst
