"""Edge-preserving post-filter for alpha mattes, guided by the input image."""
from __future__ import annotations

import numpy as np

DEFAULT_RADIUS = 20
DEFAULT_EPS = 1e-4


def box_filter(x, r):
    """Mean over the ``(2r+1)^2`` window around each pixel, clipped at the borders.

    Border windows are averaged over the pixels they actually cover. Works on
    the first two axes, so trailing channel axes are filtered independently.
    """
    if r < 0:
        raise ValueError(f"radius must be non-negative, got {r}")
    x = np.asarray(x, dtype=np.float64)
    if r == 0:
        return x.copy()
    h, w = x.shape[:2]
    pad = [(1, 0), (1, 0)] + [(0, 0)] * (x.ndim - 2)
    s = np.pad(x.cumsum(0).cumsum(1), pad)
    y0 = np.clip(np.arange(h) - r, 0, h)
    y1 = np.clip(np.arange(h) + r + 1, 0, h)
    x0 = np.clip(np.arange(w) - r, 0, w)
    x1 = np.clip(np.arange(w) + r + 1, 0, w)
    total = (s[y1][:, x1] - s[y0][:, x1] - s[y1][:, x0] + s[y0][:, x0])
    count = np.outer(y1 - y0, x1 - x0).astype(np.float64)
    return total / count.reshape(count.shape + (1,) * (x.ndim - 2))


def guided_filter(guide, src, r=DEFAULT_RADIUS, eps=DEFAULT_EPS, clamp=True):
    """Filter ``src`` (h, w) using ``guide`` (h, w) or (h, w, 3).

    Each window fits ``q = a . I + b`` by regularized least squares; the
    per-pixel coefficients are box-averaged before being applied. Colour guides
    use the full 3x3 channel covariance. The result is clamped to [0, 1]
    unless ``clamp`` is False.
    """
    guide = np.asarray(guide, dtype=np.float64)
    p = np.asarray(src, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"src must be 2-D, got shape {p.shape}")
    if guide.shape[:2] != p.shape or guide.ndim not in (2, 3):
        raise ValueError(f"guide shape {guide.shape} does not match src {p.shape}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    if guide.ndim == 3 and guide.shape[2] == 1:
        guide = guide[..., 0]
    if p.size and p.min() == p.max():
        # a flat matte is a fixed point; skip the roundoff of the integral image
        return np.clip(p, 0.0, 1.0) if clamp else p.copy()

    mean_p = box_filter(p, r)
    if guide.ndim == 2:
        mean_i = box_filter(guide, r)
        cov_ip = box_filter(guide * p, r) - mean_i * mean_p
        var_i = box_filter(guide * guide, r) - mean_i * mean_i
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(var_i + eps > 0, cov_ip / (var_i + eps), 0.0)
        b = mean_p - a * mean_i
        q = box_filter(a, r) * guide + box_filter(b, r)
    else:
        c = guide.shape[2]
        mean_i = box_filter(guide, r)
        cov_ip = box_filter(guide * p[..., None], r) - mean_i * mean_p[..., None]
        outer = guide[..., :, None] * guide[..., None, :]
        sigma = box_filter(outer.reshape(p.shape + (c * c,)), r).reshape(p.shape + (c, c))
        sigma -= mean_i[..., :, None] * mean_i[..., None, :]
        sigma += eps * np.eye(c)
        # pinv keeps eps = 0 on flat windows finite
        a = np.einsum("hwij,hwj->hwi", np.linalg.pinv(sigma), cov_ip)
        b = mean_p - np.einsum("hwi,hwi->hw", a, mean_i)
        q = np.einsum("hwi,hwi->hw", box_filter(a, r), guide) + box_filter(b, r)
    if clamp:
        q = np.clip(q, 0.0, 1.0)
    return q


def parse_refine(spec):
    """Parse a ``--refine`` value into ``(mode, options)``.

    Accepts ``none``, ``stage2`` and ``guided`` with optional ``:r=<int>,eps=<float>``.
    """
    spec = spec.strip()
    if spec in ("none", "stage2"):
        return spec, {}
    head, _, tail = spec.partition(":")
    if head != "guided":
        raise ValueError(f"unknown refine mode {spec!r}; expected none, stage2 or guided[:r=..,eps=..]")
    opts = {"r": DEFAULT_RADIUS, "eps": DEFAULT_EPS}
    for item in filter(None, tail.split(",")):
        key, _, val = item.partition("=")
        key = key.strip()
        if key == "r":
            opts["r"] = int(val)
        elif key == "eps":
            opts["eps"] = float(val)
        else:
            raise ValueError(f"unknown guided filter option {key!r}")
    if opts["r"] < 0 or opts["eps"] < 0:
        raise ValueError("guided filter r and eps must be non-negative")
    return "guided", opts
