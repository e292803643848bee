"""Dense tensor primitives with explicit gradients.

Feature maps are ``(N, C, H, W)`` arrays. Convolution kernels are stored
tap-major as ``(k, k, C_in, C_out)`` so that ``kernel[m, n]`` is the
``C_in x C_out`` matrix applied at spatial offset ``(m, n)``. Every forward
function returns ``(out, cache)`` where a backward pass needs state; the
``*_naive`` functions are slow nested-loop references used as test oracles.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError


def _check_feature_map(x, name="input"):
    if x.ndim != 4:
        raise DimensionError(f"{name} must be rank 4 (N, C, H, W), got shape {x.shape}")


def _check_kernel(kernel):
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise DimensionError(f"kernel must have shape (k, k, C_in, C_out), got {kernel.shape}")


def resolve_padding(k, padding):
    """``None`` means "same" padding, which requires an odd kernel."""
    if padding is None:
        if k % 2 == 0:
            raise ConfigurationError(f"same padding needs an odd kernel size, got {k}")
        return k // 2
    if padding < 0:
        raise ConfigurationError(f"padding must be non-negative, got {padding}")
    return int(padding)


def output_size(size, k, stride, padding):
    if stride < 1:
        raise ConfigurationError(f"stride must be positive, got {stride}")
    out = (size + 2 * padding - k) // stride + 1
    if out < 1:
        raise ConfigurationError(
            f"kernel {k} with stride {stride} and padding {padding} "
            f"leaves no output for input size {size}"
        )
    return out


def im2col(x, k, stride, padding):
    """Unfold ``x`` into a ``(N*H'*W', k*k*C)`` patch matrix, tap-major per row."""
    n, c, h, w = x.shape
    ho = output_size(h, k, stride, padding)
    wo = output_size(w, k, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, H', W', k, k) -> (N, H', W', k, k, C)
    cols = win.transpose(0, 2, 3, 4, 5, 1).reshape(n * ho * wo, k * k * c)
    return cols, ho, wo


def col2im(dcols, shape, k, stride, padding, ho, wo):
    """Adjoint of :func:`im2col`; scatters patch gradients back onto the input."""
    n, c, h, w = shape
    dcols = dcols.reshape(n, ho, wo, k, k, c)
    hp, wp = h + 2 * padding, w + 2 * padding
    dxp = np.zeros((n, hp, wp, c), dtype=dcols.dtype)
    for m in range(k):
        for q in range(k):
            dxp[:, m : m + stride * (ho - 1) + 1 : stride, q : q + stride * (wo - 1) + 1 : stride] += (
                dcols[:, :, :, m, q]
            )
    dxp = dxp[:, padding : padding + h, padding : padding + w]
    return dxp.transpose(0, 3, 1, 2)


def _cols_to_nchw(y, n, ho, wo):
    # NCHW view over channel-last memory; elementwise ops downstream keep this
    # layout, which makes the next im2col and the channel reductions cheap.
    return y.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)


def _nchw_to_rows(y):
    n, c, h, w = y.shape
    return y.transpose(0, 2, 3, 1).reshape(n * h * w, c)


def conv2d_forward(x, kernel, stride=1, padding=None, return_cols=False):
    """Cross-correlate ``x`` with ``kernel``: ``o_ij = sum_mn f_(i+m)(j+n) w_mn``.

    ``padding=None`` selects "same" padding. With ``return_cols`` the patch
    matrix is returned too so a backward pass can reuse it.
    """
    _check_feature_map(x)
    _check_kernel(kernel)
    k, _, cin, cout = kernel.shape
    if x.shape[1] != cin:
        raise DimensionError(f"input has {x.shape[1]} channels but kernel expects {cin}")
    padding = resolve_padding(k, padding)
    cols, ho, wo = im2col(x, k, stride, padding)
    out = _cols_to_nchw(cols @ kernel.reshape(k * k * cin, cout), x.shape[0], ho, wo)
    if return_cols:
        return out, cols
    return out


def conv2d_backward(x, kernel, upstream, stride=1, padding=None, cols=None):
    """Gradients of :func:`conv2d_forward` w.r.t. input and kernel."""
    _check_feature_map(x)
    _check_kernel(kernel)
    k, _, cin, cout = kernel.shape
    padding = resolve_padding(k, padding)
    n, _, h, w = x.shape
    ho = output_size(h, k, stride, padding)
    wo = output_size(w, k, stride, padding)
    if upstream.shape != (n, cout, ho, wo):
        raise DimensionError(f"upstream shape {upstream.shape} != forward output {(n, cout, ho, wo)}")
    if cols is None:
        cols, _, _ = im2col(x, k, stride, padding)
    dy = _nchw_to_rows(upstream)
    grad_kernel = (cols.T @ dy).reshape(k, k, cin, cout)
    dcols = dy @ kernel.reshape(k * k * cin, cout).T
    grad_input = col2im(dcols, x.shape, k, stride, padding, ho, wo)
    return grad_input, grad_kernel


def conv2d_naive(x, kernel, stride=1, padding=None):
    """Nested-loop reference for :func:`conv2d_forward`."""
    k, _, cin, cout = kernel.shape
    padding = resolve_padding(k, padding)
    n, c, h, w = x.shape
    if c != cin:
        raise DimensionError("channel mismatch")
    ho = output_size(h, k, stride, padding)
    wo = output_size(w, k, stride, padding)
    out = np.zeros((n, cout, ho, wo), dtype=np.result_type(x, kernel))
    for b in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for m in range(k):
                        for q in range(k):
                            r = i * stride + m - padding
                            s = j * stride + q - padding
                            if 0 <= r < h and 0 <= s < w:
                                for ci in range(cin):
                                    acc += x[b, ci, r, s] * kernel[m, q, ci, co]
                    out[b, co, i, j] = acc
    return out


@dataclass(frozen=True)
class GroupSpec:
    """Contiguous channel grouping: channel ``c`` belongs to group ``c // (C / G)``."""

    groups: int
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if self.groups < 1:
            raise ConfigurationError(f"group count must be positive, got {self.groups}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigurationError(
                f"{self.groups} groups do not divide channels "
                f"({self.in_channels} in, {self.out_channels} out)"
            )

    @property
    def in_per_group(self):
        return self.in_channels // self.groups

    @property
    def out_per_group(self):
        return self.out_channels // self.groups

    def in_assignment(self):
        return np.arange(self.in_channels) // self.in_per_group

    def out_assignment(self):
        return np.arange(self.out_channels) // self.out_per_group

    def block_mask(self):
        """The ``C_in x C_out`` block-diagonal connectivity of this grouping."""
        return self.in_assignment()[:, None] == self.out_assignment()[None, :]


def group_kernels(kernel, spec):
    """Return kernels stacked per group as ``(G, k, k, C_in/G, C_out/G)``.

    Accepts either that stacked form or a full ``(k, k, C_in, C_out)`` kernel,
    in which case only the diagonal blocks are kept.
    """
    g, ci, co = spec.groups, spec.in_per_group, spec.out_per_group
    if kernel.ndim == 5:
        if kernel.shape[0] != g or kernel.shape[3:] != (ci, co):
            raise DimensionError(f"grouped kernel {kernel.shape} does not match {spec}")
        return kernel
    _check_kernel(kernel)
    if kernel.shape[2:] != (spec.in_channels, spec.out_channels):
        raise DimensionError(f"kernel {kernel.shape} does not match {spec}")
    return np.stack([kernel[:, :, i * ci : (i + 1) * ci, i * co : (i + 1) * co] for i in range(g)])


def group_conv_forward(x, kernel, spec, stride=1, padding=None, return_cols=False):
    """Concatenation of independent convolutions over contiguous channel groups."""
    _check_feature_map(x)
    if x.shape[1] != spec.in_channels:
        raise DimensionError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    kg = group_kernels(kernel, spec)
    g, k, _, ci, co = kg.shape
    padding = resolve_padding(k, padding)
    cols, ho, wo = im2col(x, k, stride, padding)
    p = cols.shape[0]
    # (P, k*k, G, ci) -> (G, P, k*k*ci)
    gcols = cols.reshape(p, k * k, g, ci).transpose(2, 0, 1, 3).reshape(g, p, k * k * ci)
    y = gcols @ kg.reshape(g, k * k * ci, co)
    out = _cols_to_nchw(y.transpose(1, 0, 2).reshape(p, g * co), x.shape[0], ho, wo)
    if return_cols:
        return out, gcols
    return out


def group_conv_backward(x, kernel, upstream, spec, stride=1, padding=None, cols=None):
    """Gradients of :func:`group_conv_forward`; the kernel gradient is stacked per group."""
    kg = group_kernels(kernel, spec)
    g, k, _, ci, co = kg.shape
    padding = resolve_padding(k, padding)
    n, c, h, w = x.shape
    ho = output_size(h, k, stride, padding)
    wo = output_size(w, k, stride, padding)
    if upstream.shape != (n, spec.out_channels, ho, wo):
        raise DimensionError(f"upstream shape {upstream.shape} does not match forward output")
    if cols is None:
        full, _, _ = im2col(x, k, stride, padding)
        cols = full.reshape(-1, k * k, g, ci).transpose(2, 0, 1, 3).reshape(g, -1, k * k * ci)
    p = cols.shape[1]
    dy = _nchw_to_rows(upstream).reshape(p, g, co).transpose(1, 0, 2)
    grad_kernel = (cols.transpose(0, 2, 1) @ dy).reshape(g, k, k, ci, co)
    dgcols = dy @ kg.reshape(g, k * k * ci, co).transpose(0, 2, 1)
    dcols = dgcols.reshape(g, p, k * k, ci).transpose(1, 2, 0, 3).reshape(p, k * k * c)
    grad_input = col2im(dcols, x.shape, k, stride, padding, ho, wo)
    return grad_input, grad_kernel


def group_conv_naive(x, kernel, spec, stride=1, padding=None):
    """Reference: run :func:`conv2d_naive` per group and concatenate."""
    kg = group_kernels(kernel, spec)
    ci = spec.in_per_group
    parts = [
        conv2d_naive(x[:, i * ci : (i + 1) * ci], kg[i], stride, padding) for i in range(spec.groups)
    ]
    return np.concatenate(parts, axis=1)


def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(dout, cache):
    return dout * (cache > 0)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train=True, momentum=0.9, eps=1e-5):
    """Per-channel batch normalization over ``(N, H, W)``.

    In training mode batch statistics are used and the running buffers are
    updated in place (``r = momentum * r + (1 - momentum) * batch``).
    """
    _check_feature_map(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm parameters must have shape ({c},)")
    shape = (1, c, 1, 1)
    if train:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = np.einsum("nchw->c", x) / m
        xc = x - mean.astype(x.dtype).reshape(shape)
        var = np.einsum("nchw,nchw->c", xc, xc) / m
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var = running_mean, running_var
        xc = x - mean.astype(x.dtype).reshape(shape)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc
    xhat *= inv_std.astype(x.dtype).reshape(shape)
    out = xhat * gamma.astype(x.dtype).reshape(shape) + beta.astype(x.dtype).reshape(shape)
    return out, (xhat, gamma, inv_std, train)


def batchnorm_backward(dout, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, gamma, inv_std, train = cache
    shape = (1, -1, 1, 1)
    dbeta = np.einsum("nchw->c", dout)
    dgamma = np.einsum("nchw,nchw->c", dout, xhat)
    scale = (gamma * inv_std).astype(dout.dtype)
    if not train:
        return dout * scale.reshape(shape), dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    # sum(dxhat) = gamma * dbeta and sum(dxhat * xhat) = gamma * dgamma
    dx = dout - (dbeta / m).astype(dout.dtype).reshape(shape) - xhat * (dgamma / m).astype(dout.dtype).reshape(shape)
    dx *= scale.reshape(shape)
    return dx, dgamma, dbeta


def avgpool_forward(x, size=None):
    """Average over non-overlapping ``size x size`` windows; ``None`` pools globally."""
    _check_feature_map(x)
    n, c, h, w = x.shape
    if size is None:
        return x.mean(axis=(2, 3)), (x.shape, None)
    if h % size or w % size:
        raise DimensionError(f"pool size {size} does not tile {h}x{w}")
    out = x.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))
    return out, (x.shape, size)


def avgpool_backward(dout, cache):
    shape, size = cache
    n, c, h, w = shape
    if size is None:
        return np.broadcast_to(dout[:, :, None, None] / (h * w), shape).copy()
    d = np.repeat(np.repeat(dout, size, axis=2), size, axis=3)
    return d / (size * size)


def maxpool_forward(x, k=3, stride=2, padding=1):
    _check_feature_map(x)
    n, c, h, w = x.shape
    ho = output_size(h, k, stride, padding)
    wo = output_size(w, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg, k, stride, padding)


def maxpool_backward(dout, cache):
    shape, arg, k, stride, padding = cache
    n, c, h, w = shape
    ho, wo = arg.shape[2:]
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dout.dtype)
    rows = (np.arange(ho) * stride)[None, None, :, None] + arg // k
    cols = (np.arange(wo) * stride)[None, None, None, :] + arg % k
    nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    np.add.at(dxp, (nn_[:, :, None, None], cc[:, :, None, None], rows, cols), dout)
    return dxp[:, :, padding : padding + h, padding : padding + w]


def linear_forward(x, weight, bias):
    if x.ndim != 2 or weight.shape[0] != x.shape[1] or bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear shapes x{x.shape} w{weight.shape} b{bias.shape} are incompatible")
    return x @ weight + bias, (x, weight)


def linear_backward(dout, cache):
    """Returns ``(dx, dweight, dbias)``."""
    x, weight = cache
    return dout @ weight.T, x.T @ dout, dout.sum(axis=0)


def softmax_xent(logits, labels):
    """Mean softmax cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} are incompatible")
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -log_p[np.arange(n), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n
