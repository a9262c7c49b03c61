"""Differentiable kernels the matting network is assembled from.

Every layer is a ``*_forward`` / ``*_backward`` pair working on plain
``numpy`` arrays laid out as ``(batch, channel, height, width)``. The forward
function returns the output together with a cache; the backward function
takes the upstream gradient and that cache. Arithmetic follows the dtype of
the inputs, so the model runs in float32 while gradient checks can run in
float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "conv2d_forward",
    "conv2d_backward",
    "relu_forward",
    "relu_backward",
    "PoolIndices",
    "maxpool2x2_forward",
    "maxpool2x2_backward",
    "unpool2x2_forward",
    "unpool2x2_backward",
    "bilinear_resize",
    "xavier_bound",
    "xavier_init",
    "zero_extend_first_layer",
    "Adam",
]


def _check_rank4(x, name="input"):
    if x.ndim != 4:
        raise ValueError(f"{name} must be rank 4 (n, c, h, w), got shape {x.shape}")


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def conv2d_forward(x, weight, bias, stride=1, padding=0):
    """Cross-correlate ``x`` with ``weight`` and add ``bias``.

    Parameters
    ----------
    x : ndarray of shape (n, in_ch, h, w)
    weight : ndarray of shape (out_ch, in_ch, kh, kw)
    bias : ndarray of shape (out_ch,)
    stride : int
    padding : int
        Zero padding applied symmetrically on both spatial axes.

    Returns
    -------
    out : ndarray of shape (n, out_ch, h', w')
        ``h' = (h + 2 * padding - kh) // stride + 1`` and likewise for ``w'``.
    cache : tuple
        State needed by :func:`conv2d_backward`.
    """
    _check_rank4(x)
    if weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv2d shape mismatch: input {x.shape} vs weights {weight.shape}"
        )
    if bias.shape != (weight.shape[0],):
        raise ValueError(
            f"conv2d bias shape {bias.shape} does not match weights {weight.shape}"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    kh, kw = weight.shape[2:]
    h_pad, w_pad = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    if h_pad < kh or w_pad < kw:
        raise ValueError(
            f"conv2d kernel {weight.shape} larger than padded input {x.shape}"
        )

    n, c = x.shape[:2]
    out_ch = weight.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2:4]
    # im2col: one row per output pixel, ordered (c, kh, kw) like the weights
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, -1)
    out = cols @ weight.reshape(out_ch, -1).T + bias
    out = np.ascontiguousarray(out.reshape(n, ho, wo, out_ch).transpose(0, 3, 1, 2))
    cache = (x.shape, cols, weight, stride, padding)
    return out, cache


def conv2d_backward(dout, cache, need_dx=True):
    """Return ``(dx, dweight, dbias)`` for the convolution in ``cache``.

    ``dx`` is None when ``need_dx`` is false (first layer of a network).
    """
    x_shape, cols, weight, stride, padding = cache
    n, c, h, w = x_shape
    out_ch, _, kh, kw = weight.shape
    ho, wo = dout.shape[2:]

    dout_rows = dout.transpose(0, 2, 3, 1).reshape(-1, out_ch)
    dweight = (dout_rows.T @ cols).reshape(weight.shape)
    dbias = dout.sum(axis=(0, 2, 3))
    if not need_dx:
        return None, dweight, dbias

    # (c, kh, kw, n, ho, wo): every kernel tap is a contiguous block to scatter
    dcols = np.tensordot(weight, dout, axes=([0], [1]))
    dxp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    dx = dxp[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(dx), dweight, dbias


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------

def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, np.zeros((), dtype=x.dtype)), mask


def relu_backward(dout, mask):
    return np.where(mask, dout, np.zeros((), dtype=dout.dtype))


# --------------------------------------------------------------------------
# pooling / unpooling
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PoolIndices:
    """Argmax positions recorded by :func:`maxpool2x2_forward`.

    ``flat`` has the pooled shape ``(n, c, h/2, w/2)``; each entry is the
    row-major index ``row * w + col`` into the pre-pool ``h x w`` plane.
    """

    flat: np.ndarray
    input_shape: tuple

    @property
    def shape(self):
        return self.flat.shape


def maxpool2x2_forward(x):
    """2x2 max pooling with stride 2; ties go to the first cell in row-major order."""
    _check_rank4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial dims, got {x.shape}")
    blocks = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    local = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, local[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(h // 2)[:, None] + local // 2
    cols = 2 * np.arange(w // 2)[None, :] + local % 2
    return out, PoolIndices(rows * w + cols, x.shape)


def _local_offsets(indices, pooled_shape):
    if tuple(pooled_shape) != indices.flat.shape:
        raise ValueError(
            f"unpool input shape {tuple(pooled_shape)} does not match "
            f"indices shape {indices.flat.shape}"
        )
    w = indices.input_shape[3]
    rows, cols = np.divmod(indices.flat, w)
    hp, wp = indices.flat.shape[2:]
    ok = (rows // 2 == np.arange(hp)[:, None]) & (cols // 2 == np.arange(wp)[None, :])
    if not ok.all():
        raise ValueError("pool index points outside its own 2x2 window")
    return (rows % 2) * 2 + cols % 2


def unpool2x2_forward(x, indices):
    """Scatter each value of ``x`` to the argmax position recorded in ``indices``."""
    _check_rank4(x)
    local = _local_offsets(indices, x.shape)
    n, c, h, w = indices.input_shape
    blocks = np.zeros((n, c, h // 2, w // 2, 4), dtype=x.dtype)
    np.put_along_axis(blocks, local[..., None], x[..., None], axis=-1)
    out = (
        blocks.reshape(n, c, h // 2, w // 2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h, w)
    )
    return out


def unpool2x2_backward(dout, indices):
    """Gather the gradient at the positions the forward pass wrote to."""
    n, c, h, w = indices.input_shape
    if dout.shape != (n, c, h, w):
        raise ValueError(f"unpool grad shape {dout.shape} != {indices.input_shape}")
    local = _local_offsets(indices, indices.flat.shape)
    blocks = (
        dout.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    return np.take_along_axis(blocks, local[..., None], axis=-1)[..., 0]


def maxpool2x2_backward(dout, indices):
    # pooling selection and unpooling scatter are transposes of each other
    return unpool2x2_forward(dout, indices)


# --------------------------------------------------------------------------
# resizing
# --------------------------------------------------------------------------

def _axis_weights(n_in, n_out):
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(src).astype(np.intp), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def bilinear_resize(x, out_h, out_w):
    """Resize the last two axes of ``x`` with corner-aligned bilinear sampling.

    Output pixel ``i`` samples the input at ``i * (in - 1) / (out - 1)``, so the
    four corners of input and output coincide. Works for any leading shape,
    including ``(n, c, h, w)`` tensors and single ``(h, w)`` mattes.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    lo_r, hi_r, fr = _axis_weights(h, out_h)
    lo_c, hi_c, fc = _axis_weights(w, out_w)
    fr = fr.astype(x.dtype)[:, None]
    fc = fc.astype(x.dtype)
    top = x[..., lo_r, :]
    bottom = x[..., hi_r, :]
    # lerp form a + t * (b - a) keeps constant regions exact
    rows = top + fr * (bottom - top)
    left = rows[..., lo_c]
    right = rows[..., hi_c]
    return left + fc * (right - left)


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------

def xavier_bound(shape):
    out_ch, in_ch, kh, kw = shape
    fan_in = in_ch * kh * kw
    fan_out = out_ch * kh * kw
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def xavier_init(shape, rng_seed, dtype=np.float32):
    """Uniform Xavier/Glorot weights on ``[-a, a]`` with ``a = sqrt(6 / (fan_in + fan_out))``.

    ``rng_seed`` may be an int or anything :func:`numpy.random.default_rng`
    accepts (for instance a ``SeedSequence``).
    """
    if len(shape) != 4:
        raise ValueError(f"xavier_init expects a conv weight shape, got {shape}")
    bound = dtype(xavier_bound(shape))
    rng = np.random.default_rng(rng_seed)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def zero_extend_first_layer(weight):
    """Append an all-zero fourth input channel to 3-channel first-layer weights."""
    if weight.ndim != 4 or weight.shape[1] != 3:
        raise ValueError(
            f"zero_extend_first_layer needs in_ch == 3, got weights {weight.shape}"
        )
    extra = np.zeros(weight.shape[:1] + (1,) + weight.shape[2:], dtype=weight.dtype)
    return np.concatenate([weight, extra], axis=1)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over a dict of named arrays, updated in place.

    Moment buffers are created lazily the first time a name is seen, so a
    frozen parameter that is never passed to :meth:`step` gets no state.
    """

    def __init__(self, lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        """Apply one update to every entry of ``grads`` (a subset of ``params``)."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ValueError(f"grad for {name!r} has shape {g.shape}, param {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)
        return params
