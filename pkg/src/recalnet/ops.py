"""Differentiable operators on (N, C, H, W) tensors.

Only what the segmentation networks need is here.  Each op validates
shapes up front and raises :class:`ConfigError` naming the bad dimension.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from recalnet.tensor import ConfigError, Tensor, accumulate_grad, as_tensor, make_result

BN_EPS = 1e-5
LN_EPS = 1e-5

# When a list, piecewise ops append their branch decisions so a finite-difference
# checker can tell whether a perturbation crossed a kink.
branch_log: list | None = None


def _log_branch(decision: np.ndarray) -> None:
    if branch_log is not None:
        branch_log.append(decision.copy())


def _check4(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ConfigError(f"{op}: expected a rank-4 (N, C, H, W) tensor, got shape {x.shape}")


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return v, v
    a, b = v
    return int(a), int(b)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_or_scalar(a, b, "add")

    def backward(g):
        accumulate_grad(a, _reduce_to(g, a.shape))
        accumulate_grad(b, _reduce_to(g, b.shape))

    return make_result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_or_scalar(a, b, "sub")

    def backward(g):
        accumulate_grad(a, _reduce_to(g, a.shape))
        accumulate_grad(b, -_reduce_to(g, b.shape))

    return make_result(a.data - b.data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    def backward(g):
        accumulate_grad(x, g * c)

    return make_result(x.data * c, (x,), backward)


def _same_or_scalar(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ConfigError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _mul_compatible(a: Tensor, b: Tensor) -> None:
    """Allow equal shapes, scalars, or the two attention broadcasts.

    A (N, 1, H, W) region map or a (N, C, 1, 1) channel map may scale an
    (N, C, H, W) feature map.  Anything else is rejected.
    """
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ConfigError(f"mul: shapes {a.shape} and {b.shape} are not broadcast-compatible")
    (na, ca, ha, wa), (nb, cb, hb, wb) = a.shape, b.shape
    if na != nb:
        raise ConfigError(f"mul: batch size {na} != {nb}")
    region = (ca == 1 or cb == 1) and (ha, wa) == (hb, wb)
    channel = ca == cb and ((ha, wa) == (1, 1) or (hb, wb) == (1, 1))
    if not (region or channel):
        raise ConfigError(f"mul: shapes {a.shape} and {b.shape} are not broadcast-compatible")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _mul_compatible(a, b)

    def backward(g):
        if a.requires_grad:
            accumulate_grad(a, _reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            accumulate_grad(b, _reduce_to(g * a.data, b.shape))

    return make_result(a.data * b.data, (a, b), backward)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    if a.shape != b.shape:
        raise ConfigError(f"maximum: shapes {a.shape} and {b.shape} differ")
    pick_a = a.data >= b.data
    _log_branch(pick_a)

    def backward(g):
        accumulate_grad(a, np.where(pick_a, g, 0.0))
        accumulate_grad(b, np.where(pick_a, 0.0, g))

    return make_result(np.where(pick_a, a.data, b.data), (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_branch(mask)

    def backward(g):
        accumulate_grad(x, g * mask)

    return make_result(x.data * mask, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        accumulate_grad(x, g * y * (1.0 - y))

    return make_result(y, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        accumulate_grad(x, np.broadcast_to(g.reshape(()), x.shape))

    return make_result(x.data.sum().reshape(1, 1, 1, 1), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.size

    def backward(g):
        accumulate_grad(x, np.broadcast_to(g.reshape(()) / n, x.shape))

    return make_result(x.data.mean().reshape(1, 1, 1, 1), (x,), backward)


# ---------------------------------------------------------------------------
# channel plumbing


def channel_concat(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ConfigError("channel_concat: nothing to concatenate")
    for x in xs:
        _check4(x, "channel_concat")
    n, _, h, w = xs[0].shape
    for x in xs[1:]:
        if (x.shape[0], x.shape[2], x.shape[3]) != (n, h, w):
            raise ConfigError(f"channel_concat: {x.shape} does not match (N={n}, H={h}, W={w})")
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            accumulate_grad(x, g[:, lo:hi])

    return make_result(np.concatenate([x.data for x in xs], axis=1), xs, backward)


def interleave_channels(first: Tensor, second: Tensor) -> Tensor:
    """Stack two C-channel maps as [first_1, second_1, first_2, second_2, ...]."""
    _check4(first, "interleave_channels")
    if first.shape != second.shape:
        raise ConfigError(f"interleave_channels: shapes {first.shape} and {second.shape} differ")
    n, c, h, w = first.shape
    out = np.stack([first.data, second.data], axis=2).reshape(n, 2 * c, h, w)

    def backward(g):
        g = g.reshape(n, c, 2, h, w)
        accumulate_grad(first, g[:, :, 0])
        accumulate_grad(second, g[:, :, 1])

    return make_result(out, (first, second), backward)


# ---------------------------------------------------------------------------
# convolution and pooling


def conv_output_size(size: int, kernel: int, pad: int, stride: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=1, padding=0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation.

    ``weight`` has shape (P, C // groups, m, n).
    """
    _check4(x, "conv2d")
    if weight.data.ndim != 4:
        raise ConfigError(f"conv2d: weight must be rank 4, got {weight.shape}")
    n, c, h, w = x.shape
    p, cg, m, k = weight.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if groups < 1 or c % groups:
        raise ConfigError(f"conv2d: in_channels={c} not divisible by groups={groups}")
    if p % groups:
        raise ConfigError(f"conv2d: out_channels={p} not divisible by groups={groups}")
    if cg != c // groups:
        raise ConfigError(f"conv2d: weight expects {cg * groups} in_channels, input has C={c}")
    if bias is not None and bias.shape != (p,):
        raise ConfigError(f"conv2d: bias shape {bias.shape} != ({p},)")
    ho = conv_output_size(h, m, ph, sh)
    wo = conv_output_size(w, k, pw, sw)
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d: kernel ({m}x{k}) larger than padded input ({h}x{w})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    pg = p // groups
    span_h, span_w = sh * (ho - 1) + 1, sw * (wo - 1) + 1
    # im2col: (N, C, m, k, Ho, Wo) -> (N, groups, Cg*m*k, Ho*Wo), one gather per call
    win = np.lib.stride_tricks.sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    cols = win[:, :, :m, :k, ::sh, ::sw].reshape(n, groups, cg * m * k, ho * wo)
    wmat = weight.data.reshape(groups, pg, cg * m * k)
    out = (wmat @ cols).reshape(n, p, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, p, 1, 1)

    def backward(g):
        gg = g.reshape(n, groups, pg, ho * wo)
        if weight.requires_grad:
            gw = np.einsum("ngpl,ngql->gpq", gg, cols, optimize=True) if groups > 1 \
                else np.tensordot(gg[:, 0], cols[:, 0], axes=([0, 2], [0, 2]))
            accumulate_grad(weight, gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (wmat.transpose(0, 2, 1) @ gg).reshape(n, c, m, k, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(m):
                for j in range(k):
                    gxp[:, :, i:i + span_h:sh, j:j + span_w:sw] += dcols[:, :, i, j]
            accumulate_grad(x, gxp[:, :, ph:ph + h, pw:pw + w])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def avg_pool(x: Tensor, kernel, stride: int = 1, padding: str | int = "same") -> Tensor:
    """Average pooling with zero padding counted in the divisor.

    ``padding="same"`` pads (m // 2, n // 2) and needs odd kernels; with
    stride 1 the output keeps the input's spatial size.
    """
    _check4(x, "avg_pool")
    m, k = _pair(kernel)
    if padding == "same":
        if m % 2 == 0 or k % 2 == 0:
            raise ConfigError(f"avg_pool: same padding needs odd kernel, got ({m}x{k})")
        ph, pw = m // 2, k // 2
    else:
        ph, pw = _pair(padding)
    if stride < 1:
        raise ConfigError(f"avg_pool: stride must be >= 1, got {stride}")
    n, c, h, w = x.shape
    ho = conv_output_size(h, m, ph, stride)
    wo = conv_output_size(w, k, pw, stride)
    if ho < 1 or wo < 1:
        raise ConfigError(f"avg_pool: kernel ({m}x{k}) larger than padded input ({h}x{w})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    area = float(m * k)

    def window(arr, i, j):
        return arr[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]

    out = np.zeros((n, c, ho, wo), dtype=x.data.dtype)
    for i in range(m):
        for j in range(k):
            out += window(xp, i, j)
    out /= area

    def backward(g):
        gxp = np.zeros_like(xp)
        share = g / area
        for i in range(m):
            for j in range(k):
                window(gxp, i, j)[...] += share
        accumulate_grad(x, gxp[:, :, ph:ph + h, pw:pw + w])

    return make_result(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    _check4(x, "global_avg_pool")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ConfigError(f"global_avg_pool: empty spatial extent ({h}x{w})")

    def backward(g):
        accumulate_grad(x, np.broadcast_to(g / (h * w), x.shape))

    return make_result(x.data.mean(axis=(2, 3), keepdims=True), (x,), backward)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2.  Ties route the gradient to the first max."""
    _check4(x, "max_pool2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"max_pool2: spatial dims must be even, got H={h}, W={w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    _log_branch(arg)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        accumulate_grad(x, gb.reshape(n, c, h, w))

    return make_result(out, (x,), backward)


def _upsample_matrix(size: int, dtype) -> np.ndarray:
    """Linear map from ``size`` samples to ``2 * size`` with half-pixel centres."""
    out = np.zeros((2 * size, size), dtype=dtype)
    src = (np.arange(2 * size) + 0.5) / 2.0 - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, size - 1)
    frac = src - i0
    rows = np.arange(2 * size)
    np.add.at(out, (rows, i0), 1.0 - frac)
    np.add.at(out, (rows, i1), frac)
    return out


def bilinear_upsample2(x: Tensor) -> Tensor:
    """Double H and W by bilinear interpolation (align_corners off)."""
    _check4(x, "bilinear_upsample2")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ConfigError(f"bilinear_upsample2: empty spatial extent ({h}x{w})")
    uh = _upsample_matrix(h, x.data.dtype)
    uw = _upsample_matrix(w, x.data.dtype)
    out = uh @ x.data @ uw.T

    def backward(g):
        accumulate_grad(x, uh.T @ g @ uw)

    return make_result(out, (x,), backward)


# ---------------------------------------------------------------------------
# normalisation


def _norm_backward(g_hat: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, axes) -> np.ndarray:
    count = int(np.prod([xhat.shape[a] for a in axes]))
    s1 = g_hat.sum(axis=axes, keepdims=True)
    s2 = (g_hat * xhat).sum(axis=axes, keepdims=True)
    return inv_std / count * (count * g_hat - s1 - xhat * s2)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = BN_EPS) -> Tensor:
    """Per-channel normalisation over (N, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, as most frameworks do).
    """
    _check4(x, "batch_norm")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigError(f"batch_norm: affine params must have shape ({c},)")
    axes = (0, 2, 3)
    if training:
        count = n * h * w
        if count < 2:
            raise ConfigError("batch_norm: training mode needs N*H*W >= 2")
        mean = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c) * count / (count - 1)
    else:
        mean = running_mean.reshape(1, c, 1, 1)
        var = running_var.reshape(1, c, 1, 1)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    g4 = gamma.data.reshape(1, c, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        accumulate_grad(gamma, (g * xhat).sum(axis=axes))
        accumulate_grad(beta, g.sum(axis=axes))
        if x.requires_grad:
            if training:
                accumulate_grad(x, _norm_backward(g * g4, xhat, inv_std, axes))
            else:
                accumulate_grad(x, g * g4 * inv_std)

    return make_result(out, (x, gamma, beta), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Per-sample normalisation over (C, H, W) with a per-channel affine."""
    _check4(x, "layer_norm")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigError(f"layer_norm: affine params must have shape ({c},)")
    axes = (1, 2, 3)
    mean = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    g4 = gamma.data.reshape(1, c, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        accumulate_grad(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        accumulate_grad(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            accumulate_grad(x, _norm_backward(g * g4, xhat, inv_std, axes))

    return make_result(out, (x, gamma, beta), backward)
