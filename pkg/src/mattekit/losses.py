"""Charbonnier alpha-prediction and compositional losses with analytic gradients.

All functions take batched ``(n, c, h, w)`` arrays. Per-pixel terms are
weighted by the unknown-region mask, averaged over the masked pixels of each
sample (and over RGB for the compositional term), then averaged over the
batch. Each returns ``(loss, grad)`` with ``grad`` shaped like the prediction.
"""
from dataclasses import dataclass

import numpy as np


@dataclass
class LossConfig:
    eps: float = 1e-6
    w_l: float = 0.5

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0.0 <= self.w_l <= 1.0:
            raise ValueError("w_l must lie in [0, 1]")


def _counts(mask):
    counts = mask.reshape(mask.shape[0], -1).sum(axis=1).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError("loss needs a non-empty unknown region in every sample")
    return counts[:, None, None, None]


def charbonnier_grad(diff, eps):
    """d/d diff of sqrt(diff^2 + eps^2)."""
    return diff / np.sqrt(diff * diff + eps * eps)


def alpha_prediction_loss(pred, gt, mask, cfg=None):
    cfg = cfg or LossConfig()
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {mask.shape}")
    counts = _counts(mask)
    n = pred.shape[0]
    diff = pred.astype(np.float64) - gt
    per_pixel = np.sqrt(diff * diff + cfg.eps ** 2)
    loss = float(np.sum(per_pixel * mask / counts) / n)
    grad = charbonnier_grad(diff, cfg.eps) * mask / (counts * n)
    return loss, grad.astype(pred.dtype)


def compositional_loss(pred_alpha, fg, bg, image, mask, cfg=None):
    """Compare ``pred_alpha * fg + (1 - pred_alpha) * bg`` against ``image``.

    ``pred_alpha`` and ``mask`` are ``(n, 1, h, w)``; colour inputs ``(n, 3, h, w)``.
    """
    cfg = cfg or LossConfig()
    if fg.shape != bg.shape or fg.shape != image.shape:
        raise ValueError(f"colour shape mismatch: fg {fg.shape}, bg {bg.shape}, image {image.shape}")
    if pred_alpha.shape != mask.shape or pred_alpha.shape[2:] != fg.shape[2:]:
        raise ValueError(f"alpha {pred_alpha.shape} / mask {mask.shape} vs colour {fg.shape}")
    counts = _counts(mask) * fg.shape[1]
    n = pred_alpha.shape[0]
    a = pred_alpha.astype(np.float64)
    fg64 = fg.astype(np.float64)
    bg64 = bg.astype(np.float64)
    diff = a * fg64 + (1.0 - a) * bg64 - image
    per_term = np.sqrt(diff * diff + cfg.eps ** 2)
    loss = float(np.sum(per_term * mask / counts) / n)
    dcolour = charbonnier_grad(diff, cfg.eps) * (fg64 - bg64)
    grad = dcolour.sum(axis=1, keepdims=True) * mask / (counts * n)
    return loss, grad.astype(pred_alpha.dtype)


def overall_loss(pred, batch, cfg=None):
    """``w_l * alpha_loss + (1 - w_l) * compositional_loss``.

    ``batch`` maps ``alpha``, ``fg``, ``bg``, ``image`` and ``mask`` to arrays.
    Returns ``(loss, grad, parts)`` where ``parts`` holds both components.
    """
    cfg = cfg or LossConfig()
    la, ga = alpha_prediction_loss(pred, batch["alpha"], batch["mask"], cfg)
    lc, gc = compositional_loss(pred, batch["fg"], batch["bg"], batch["image"], batch["mask"], cfg)
    loss = cfg.w_l * la + (1.0 - cfg.w_l) * lc
    grad = (cfg.w_l * ga + (1.0 - cfg.w_l) * gc).astype(pred.dtype)
    return loss, grad, {"alpha": la, "comp": lc}
