"""Differentiable operators.

Every operator returns a Tensor wired into the autodiff tape with an exact
hand-derived backward. Elementwise binary ops require identical shapes (or a
scalar operand); nothing here broadcasts silently along the frame axis.
Parameter broadcasting happens only inside named primitives (conv bias,
layer-norm affine) where the semantics are explicit.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf

from ..errors import DegenerateInput, ShapeMismatch
from .tensor import Tensor, make_result

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_LOG10_SCALE = 10.0 / math.log(10.0)

SI_SDR_CAP_DB = 60.0
_CAP_RATIO = 1e-12  # ||e||^2 below this fraction of ||s||^2 counts as exact


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _binary_shapes_ok(a, b):
    return a.shape == b.shape or a.size == 1 or b.size == 1


# ---------------------------------------------------------------------------
# elementwise & reductions
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not _binary_shapes_ok(a, b):
        raise ShapeMismatch(f"add: shapes {a.shape} and {b.shape} differ (no implicit broadcast)")

    def backward(g):
        ga = g if a.shape == g.shape else np.sum(g).reshape(a.shape)
        gb = g if b.shape == g.shape else np.sum(g).reshape(b.shape)
        return ga, gb

    return make_result(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not _binary_shapes_ok(a, b):
        raise ShapeMismatch(f"mul: shapes {a.shape} and {b.shape} differ (no implicit broadcast)")

    def backward(g):
        ga = g * b.data
        gb = g * a.data
        if a.shape != g.shape:
            ga = np.sum(ga).reshape(a.shape)
        if b.shape != g.shape:
            gb = np.sum(gb).reshape(b.shape)
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        return (g * c,)

    return make_result(a.data * c, (a,), backward, "scale")


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        return (np.full_like(a.data, float(g)),)

    return make_result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    n = a.size

    def backward(g):
        return (np.full_like(a.data, float(g) / n),)

    return make_result(np.asarray(a.data.mean(), dtype=a.dtype), (a,), backward, "mean_all")


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return make_result(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return make_result(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward, "transpose")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` elements starting at `start` along `axis`."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeMismatch(
            f"narrow: [{start}, {start + length}) out of range for axis {axis} of size {a.shape[axis]}"
        )
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return make_result(np.ascontiguousarray(a.data[index]), (a,), backward, "narrow")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != first:
            raise ShapeMismatch(f"stack: shapes {first} and {t.shape} differ")

    def backward(g):
        pieces = np.moveaxis(g, axis, 0)
        return tuple(pieces[i] for i in range(len(tensors)))

    return make_result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward, "stack")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"matmul: incompatible stacked shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dims {a.shape[-1]} != {b.shape[-2]}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return make_result(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T + b with w of shape (d_out, d_in) over the last axis of x."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeMismatch(f"linear: input dim {x.shape[-1]} != weight d_in {w.shape[1]}")
    y = x.data @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeMismatch(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[0])
        x2 = x.data.reshape(-1, w.shape[1])
        gx = (g2 @ w.data).reshape(x.shape)
        gw = g2.T @ x2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(y, parents, backward, "linear")


# ---------------------------------------------------------------------------
# 1-D convolutions (cross-correlation convention, no kernel flip)
# ---------------------------------------------------------------------------

def _batched(x: Tensor):
    if x.ndim == 2:
        return x.data[None, :, :], False
    if x.ndim == 3:
        return x.data, True
    raise ShapeMismatch(f"expected (C, L) or (B, C, L), got shape {x.shape}")


def _conv_cols(xp: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """Strided gather view (B, C, K, L') over a padded contiguous signal."""
    batch, channels, length = xp.shape
    frames = (length - kernel) // stride + 1
    sb, sc, sl = xp.strides
    return as_strided(xp, (batch, channels, kernel, frames), (sb, sc, sl, sl * stride))


def _scatter_cols(cols: np.ndarray, stride: int, out_len: int) -> np.ndarray:
    """Adjoint of _conv_cols: sum (B, C, K, L') contributions back to (B, C, out_len)."""
    batch, channels, kernel, frames = cols.shape
    out = np.zeros((batch, channels, out_len), dtype=cols.dtype)
    span = (frames - 1) * stride + 1
    for k in range(kernel):
        out[:, :, k : k + span : stride] += cols[:, :, k, :]
    return out


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Strided 1-D cross-correlation: (B, C_in, L) -> (B, C_out, L')."""
    x3, batched = _batched(x)
    if w.ndim != 3:
        raise ShapeMismatch(f"conv1d: weights must be (C_out, C_in, K), got {w.shape}")
    c_out, c_in, kernel = w.shape
    if x3.shape[1] != c_in:
        raise ShapeMismatch(f"conv1d: input channels {x3.shape[1]} != weight C_in {c_in}")
    length = x3.shape[2]
    if length + 2 * padding < kernel:
        raise ShapeMismatch(f"conv1d: padded length {length + 2 * padding} < kernel {kernel}")
    if padding:
        xp = np.zeros((x3.shape[0], c_in, length + 2 * padding), dtype=x3.dtype)
        xp[:, :, padding : padding + length] = x3
    else:
        xp = np.ascontiguousarray(x3)
    cols = _conv_cols(xp, kernel, stride)
    y = np.einsum("ock,bckl->bol", w.data, cols, optimize=True)
    if b is not None:
        if b.shape != (c_out,):
            raise ShapeMismatch(f"conv1d: bias shape {b.shape} != ({c_out},)")
        y = y + b.data[:, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gw = np.einsum("bol,bckl->ock", g, cols, optimize=True)
        cols_g = np.einsum("ock,bol->bckl", w.data, g, optimize=True)
        gxp = _scatter_cols(cols_g, stride, xp.shape[2])
        gx = gxp[:, :, padding : padding + length] if padding else gxp
        if not batched:
            gx = gx[0]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    out = y if batched else y[0]
    return make_result(out, parents, backward, "conv1d")


def conv_transpose1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Adjoint of conv1d with tied weights: (B, C_in, M) -> (B, C_out, (M-1)*stride + K)."""
    x3, batched = _batched(x)
    if w.ndim != 3:
        raise ShapeMismatch(f"conv_transpose1d: weights must be (C_in, C_out, K), got {w.shape}")
    c_in, c_out, kernel = w.shape
    if x3.shape[1] != c_in:
        raise ShapeMismatch(f"conv_transpose1d: input channels {x3.shape[1]} != weight C_in {c_in}")
    frames = x3.shape[2]
    out_len = (frames - 1) * stride + kernel
    cols = np.einsum("iok,bim->bokm", w.data, x3, optimize=True)
    y = _scatter_cols(cols, stride, out_len)
    if b is not None:
        if b.shape != (c_out,):
            raise ShapeMismatch(f"conv_transpose1d: bias shape {b.shape} != ({c_out},)")
        y = y + b.data[:, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gc = np.ascontiguousarray(g)
        g_cols = _conv_cols(gc, kernel, stride)
        gx = np.einsum("iok,bokm->bim", w.data, g_cols, optimize=True)
        gw = np.einsum("bim,bokm->iok", x3, g_cols, optimize=True)
        if not batched:
            gx = gx[0]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    out = y if batched else y[0]
    return make_result(out, parents, backward, "conv_transpose1d")


# ---------------------------------------------------------------------------
# normalization & activations
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along `axis`, then apply affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    size = x.shape[axis]
    if gain.shape != (size,) or bias.shape != (size,):
        raise ShapeMismatch(
            f"layer_norm: affine shapes {gain.shape}/{bias.shape} != ({size},) for axis {axis}"
        )
    bshape = [1] * x.ndim
    bshape[axis] = size
    gexp = gain.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=axis, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_sigma
    y = gexp * xhat + bias.data.reshape(bshape)
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        gxhat = g * gexp
        m1 = gxhat.mean(axis=axis, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=axis, keepdims=True)
        gx = inv_sigma * (gxhat - m1 - xhat * m2)
        ggain = (g * xhat).sum(axis=reduce_axes)
        gbias = g.sum(axis=reduce_axes)
        return gx, ggain, gbias

    return make_result(y, (x, gain, bias), backward, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """Exact-Phi GELU: x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return make_result(x.data * cdf, (x,), backward, "gelu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return make_result(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return make_result(s, (x,), backward, "softmax")


# ---------------------------------------------------------------------------
# attention & positional encoding
# ---------------------------------------------------------------------------

def sinusoidal_positional_encoding(n_frames: int, width: int, dtype=np.float32) -> np.ndarray:
    """PE[m, 2i] = sin(m / 10000^(2i/width)), PE[m, 2i+1] = cos(same angle)."""
    if width % 2 != 0:
        raise ValueError(f"positional encoding width must be even, got {width}")
    pos = np.arange(n_frames, dtype=np.float64)[:, None]
    freqs = np.exp(-math.log(10000.0) * np.arange(0, width, 2, dtype=np.float64) / width)
    angles = pos * freqs[None, :]
    pe = np.empty((n_frames, width), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe.astype(dtype)


def multihead_self_attention(
    x: Tensor,
    wq: Tensor, bq: Tensor,
    wk: Tensor, bk: Tensor,
    wv: Tensor, bv: Tensor,
    wo: Tensor, bo: Tensor,
    num_heads: int,
) -> Tensor:
    """Scaled dot-product self-attention over frames; x is (M, D) or (B, M, D)."""
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    batch, frames, width = x.shape
    if width % num_heads != 0:
        raise ShapeMismatch(f"model width {width} not divisible by {num_heads} heads")
    head = width // num_heads

    def split_heads(t):
        t = reshape(t, (batch, frames, num_heads, head))
        return transpose(t, (0, 2, 1, 3))  # (B, H, M, head)

    q = split_heads(linear(x, wq, bq))
    k = split_heads(linear(x, wk, bk))
    v = split_heads(linear(x, wv, bv))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head))
    attn = softmax(scores, axis=-1)
    mixed = matmul(attn, v)
    merged = reshape(transpose(mixed, (0, 2, 1, 3)), (batch, frames, width))
    out = linear(merged, wo, bo)
    if squeeze:
        out = reshape(out, (frames, width))
    return out


# ---------------------------------------------------------------------------
# fixed-phase inverse STFT (used by the spectrogram encoder/decoder variant)
# ---------------------------------------------------------------------------

def masked_phase_istft(
    masked_mag: Tensor, phase: np.ndarray, window: np.ndarray, hop: int, out_len: int
) -> Tensor:
    """Overlap-add inverse STFT of masked_mag * exp(i*phase); phase is constant.

    masked_mag and phase are (B, F, M) with F = len(window)//2 + 1. Returns
    (B, out_len), trimming the analysis padding.
    """
    batch, n_bins, n_frames = masked_mag.shape
    window_len = window.shape[0]
    if n_bins != window_len // 2 + 1:
        raise ShapeMismatch(f"masked_phase_istft: {n_bins} bins != window/2+1 = {window_len // 2 + 1}")
    rot = np.exp(1j * phase)
    spec = (masked_mag.data * rot).transpose(0, 2, 1)  # (B, M, F)
    frames = np.fft.irfft(spec, n=window_len, axis=-1)
    full_len = (n_frames - 1) * hop + window_len
    y = np.zeros((batch, full_len), dtype=masked_mag.dtype)
    wsq = np.zeros(full_len, dtype=np.float64)
    for m in range(n_frames):
        y[:, m * hop : m * hop + window_len] += frames[:, m, :] * window
        wsq[m * hop : m * hop + window_len] += window * window
    wsq = np.maximum(wsq, 1e-12)
    y /= wsq
    coeff = np.full(n_bins, 2.0 / window_len)
    coeff[0] = 1.0 / window_len
    if window_len % 2 == 0:
        coeff[-1] = 1.0 / window_len

    def backward(g):
        z = np.zeros((batch, full_len), dtype=np.float64)
        z[:, : g.shape[1]] = g
        z /= wsq
        sb, sl = z.strides
        g_frames = as_strided(z, (batch, n_frames, window_len), (sb, sl * hop, sl)) * window
        spec_grad = np.fft.rfft(g_frames, axis=-1)  # (B, M, F)
        g_mag = coeff * np.real(rot.transpose(0, 2, 1) * np.conj(spec_grad))
        return (g_mag.transpose(0, 2, 1).astype(masked_mag.dtype),)

    return make_result(y[:, :out_len].astype(masked_mag.dtype), (masked_mag,), backward, "masked_phase_istft")


# ---------------------------------------------------------------------------
# scale-invariant SDR training objective
# ---------------------------------------------------------------------------

def si_sdr_loss(est: Tensor, target, cap_db: float = SI_SDR_CAP_DB) -> Tensor:
    """Negative mean SI-SDR over all (batch, source) channels.

    target is a constant array shaped like est; channel assignment is fixed
    (no permutation search). Channels whose error energy is negligible are
    capped at +cap_db and contribute zero gradient.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if est.shape != t.shape:
        raise ShapeMismatch(f"si_sdr_loss: est {est.shape} vs target {t.shape}")
    e = est.data
    tt = np.sum(t * t, axis=-1, dtype=np.float64)
    if np.any(tt == 0.0):
        raise DegenerateInput("si_sdr_loss: all-zero target channel")
    alpha = np.sum(e * t, axis=-1, dtype=np.float64) / tt
    s = alpha[..., None] * t
    r = s - e
    v = alpha * alpha * tt
    err = np.sum(r * r, axis=-1, dtype=np.float64)
    capped = (err <= _CAP_RATIO * v) & (v > 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.where(capped, cap_db, 10.0 * np.log10(v / err))
    n = vals.size
    loss = -vals.mean()

    def backward(g):
        g0 = -float(g) / n
        live = ~capped
        # d(si_sdr)/d(est) = (20/ln10) * (alpha*t/||s||^2 + r/||e||^2)
        with np.errstate(divide="ignore", invalid="ignore"):
            term_s = np.where(live, alpha / np.maximum(v, 1e-300), 0.0)[..., None] * t
            term_e = np.where(live, 1.0 / np.maximum(err, 1e-300), 0.0)[..., None] * r
        g_est = g0 * 2.0 * _LOG10_SCALE * (term_s + term_e)
        return (g_est.astype(est.dtype),)

    return make_result(np.asarray(loss, dtype=est.dtype), (est,), backward, "si_sdr_loss")
