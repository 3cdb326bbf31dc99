"""Differentiable layer primitives: 3D convolution, group norm, GELU, affine maps,
pooling and the two losses used for training."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from ..errors import ConfigError, ShapeError, ValidationError
from .tensor import Tensor, _wrap

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def conv_output_extent(extent: int, k: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - k) // stride + 1


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 3D cross-correlation.

    ``x`` is [N, Cin, D, H, W], ``weight`` is [Cout, Cin, k, k, k] and ``bias``
    is [Cout]. Implemented as a polyphase im2col followed by one matrix product.
    """
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be [N,C,D,H,W], got {x.shape}")
    if weight.ndim != 5 or len(set(weight.shape[2:])) != 1:
        raise ShapeError(f"conv3d weight must be [Cout,Cin,k,k,k], got {weight.shape}")
    n, cin, d, h, w = x.shape
    cout, wcin, k = weight.shape[:3]
    if wcin != cin:
        raise ShapeError(f"conv3d channel axis mismatch: input has Cin={cin}, weight has Cin={wcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv3d bias must be [{cout}], got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv3d needs stride >= 1 and padding >= 0 (got {stride}, {padding})")
    too_small = [ax for ax, e in zip("DHW", (d, h, w)) if e + 2 * padding < k]
    if too_small:
        raise ShapeError(f"conv3d kernel {k} does not fit spatial axes {','.join(too_small)} of {x.shape}")

    do, ho, wo = (conv_output_extent(e, k, stride, padding) for e in (d, h, w))
    s = stride
    # Polyphase layout: the zero-padded input is split into s^3 phase volumes on
    # a coarse grid (Dq, Hq, Wq), with one spare plane of slack at the end. Kernel
    # tap (a, b, c) then reads phase (a%s, b%s, c%s) at a fixed flat offset, so
    # each tap's im2col rows are single contiguous slices of length L. Outputs are
    # computed on the coarse (do, Hq, Wq) grid and cropped to (do, ho, wo).
    dq, hq, wq = (-(-(e + 2 * padding) // s) for e in (d, h, w))
    grid = np.zeros((cin, n, dq * s, hq * s, wq * s))
    grid[:, :, padding:padding + d, padding:padding + h, padding:padding + w] = x.data.transpose(1, 0, 2, 3, 4)
    phases = np.zeros((cin, s, s, s, n, dq + 1, hq, wq))
    phases[..., :dq, :, :] = grid.reshape(cin, n, dq, s, hq, s, wq, s).transpose(0, 3, 5, 7, 1, 2, 4, 6)
    flat = phases.reshape(cin, s, s, s, n, -1)
    plane = hq * wq
    L = do * plane
    taps = [(a, b, c, (a // s) * plane + (b // s) * wq + c // s) for a in range(k) for b in range(k) for c in range(k)]

    cols = np.empty((k ** 3, cin, n, L))
    for t, (a, b, c, off) in enumerate(taps):
        cols[t] = flat[:, a % s, b % s, c % s, :, off:off + L]
    cols = cols.reshape(k ** 3 * cin, n * L)
    wmat = weight.data.transpose(0, 2, 3, 4, 1).reshape(cout, -1)
    out = (wmat @ cols).reshape(cout, n, do, hq, wq)[:, :, :, :ho, :wo]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4)) + bias.data[:, None, None, None]

    def back(g):
        gq = np.zeros((cout, n, do, hq, wq))
        gq[:, :, :, :ho, :wo] = g.transpose(1, 0, 2, 3, 4)
        gq = gq.reshape(cout, n * L)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (gq @ cols.T).reshape(cout, k, k, k, cin).transpose(0, 4, 1, 2, 3)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        if x.requires_grad:
            gcols = (wmat.T @ gq).reshape(k ** 3, cin, n, L)
            gflat = np.zeros_like(flat)
            for t, (a, b, c, off) in enumerate(taps):
                gflat[:, a % s, b % s, c % s, :, off:off + L] += gcols[t]
            ggrid = gflat.reshape(cin, s, s, s, n, dq + 1, hq, wq)[..., :dq, :, :]
            ggrid = ggrid.transpose(0, 4, 5, 1, 6, 2, 7, 3).reshape(cin, n, dq * s, hq * s, wq * s)
            gx = ggrid[:, :, padding:padding + d, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3, 4)
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    return Tensor.from_op(out, (x, weight, bias), back)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel group) over its channels and all spatial positions."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if x.ndim < 2:
        raise ShapeError(f"group_norm input needs a channel axis, got {x.shape}")
    n, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise ConfigError(f"group count {groups} does not divide channel count {c}")
    if eps <= 0:
        raise ConfigError(f"group_norm eps must be positive, got {eps}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must be [{c}], got {gamma.shape} and {beta.shape}")

    bshape = (1, c) + (1,) * (x.ndim - 2)
    xg = x.data.reshape(n, groups, -1)
    m = xg.shape[2]
    mean = xg.mean(axis=2, keepdims=True)
    centered = xg - mean
    var = (centered * centered).mean(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv_std).reshape(x.shape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    reduce_axes = (0,) + tuple(range(2, x.ndim))

    def back(g):
        ggamma = (g * xhat).sum(axis=reduce_axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=reduce_axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = (g * gamma.data.reshape(bshape)).reshape(n, groups, m)
            xh = xhat.reshape(n, groups, m)
            gx = inv_std * (
                dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True)
            )
            gx = gx.reshape(x.shape)
        return gx, ggamma, gbeta

    return Tensor.from_op(out, (x, gamma, beta), back)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the erf form of the normal CDF."""
    x = _wrap(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return Tensor.from_op(x.data * cdf, (x,), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` laid out [in, out]."""
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot multiply input {x.shape} by weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias must be [{weight.shape[1]}], got {bias.shape}")

    def back(g):
        return (
            g @ weight.data.T if x.requires_grad else None,
            x.data.T @ g if weight.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    return Tensor.from_op(x.data @ weight.data + bias.data, (x, weight, bias), back)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all spatial positions: [N, C, D, H, W] -> [N, C]."""
    x = _wrap(x)
    if x.ndim != 5:
        raise ShapeError(f"global_avg_pool expects [N,C,D,H,W], got {x.shape}")
    count = x.shape[2] * x.shape[3] * x.shape[4]
    shape = x.shape

    def back(g):
        return (np.broadcast_to((g / count)[:, :, None, None, None], shape).copy(),)

    return Tensor.from_op(x.data.mean(axis=(2, 3, 4)), (x,), back)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Batch-mean cross-entropy of a max-shifted softmax.

    Returns ``(loss, probabilities)``; probabilities are plain arrays and carry
    no graph.
    """
    logits = _wrap(logits)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.ndim != 2 or labels.shape != logits.shape:
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} must both be [N,k]")
    if logits.shape[1] < 2:
        raise ShapeError("softmax_cross_entropy needs k >= 2 classes")
    if not (np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)):
        raise ValidationError("every label row must be one-hot")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    probs = np.exp(log_p)
    loss = -(log_p * labels).sum() / n
    return Tensor.from_op(np.asarray(loss), (logits,), lambda g: (g * (probs - labels) / n,)), probs


def l1_mean_distance(a: Tensor, b: Tensor, axis=None) -> Tensor:
    """Mean absolute difference, over everything or along ``axis``.

    The subgradient at exact ties is 0.
    """
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_mean_distance shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    count = diff.size if axis is None else diff.shape[axis]
    sign = np.sign(diff)
    shape = a.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        ga = np.broadcast_to(g, shape) * sign / count
        return ga, -ga

    return Tensor.from_op(np.asarray(np.abs(diff).mean(axis=axis)), (a, b), back)
