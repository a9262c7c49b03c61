"""Trimap labels and generation from a ground-truth matte."""
import numpy as np
from scipy import ndimage

BG = 0
UNKNOWN = 128
FG = 255

# alpha within PURE_TOL of 0 or 1 counts as definite background / foreground
PURE_TOL = 1e-3


def erode_square(mask, d):
    """Binary erosion by a (2d+1) x (2d+1) square; outside the image counts as set."""
    if d == 0:
        return mask.copy()
    return ndimage.minimum_filter(
        mask.astype(np.uint8), size=2 * d + 1, mode="constant", cval=1
    ).astype(bool)


def make_trimap(alpha, d, rng=None):
    """Label pixels FG / BG / UNKNOWN by eroding the pure regions of ``alpha``.

    ``d`` is the dilation radius of the unknown band in pixels. Pass a
    ``(d_min, d_max)`` pair together with ``rng`` to draw it uniformly.
    """
    if isinstance(d, tuple):
        if rng is None:
            raise ValueError("a dilation range needs an rng")
        d = int(rng.integers(d[0], d[1] + 1))
    if d < 0:
        raise ValueError(f"dilation must be non-negative, got {d}")
    alpha = np.asarray(alpha)
    trimap = np.full(alpha.shape, UNKNOWN, dtype=np.uint8)
    trimap[erode_square(alpha >= 1.0 - PURE_TOL, d)] = FG
    trimap[erode_square(alpha <= PURE_TOL, d)] = BG
    return trimap


def unknown_mask(trimap):
    return np.asarray(trimap) == UNKNOWN


def encode_trimap(trimap):
    """Network encoding of a trimap: BG 0, UNKNOWN 0.5, FG 1 (float32)."""
    trimap = np.asarray(trimap)
    out = np.full(trimap.shape, 0.5, dtype=np.float32)
    out[trimap == BG] = 0.0
    out[trimap == FG] = 1.0
    return out
