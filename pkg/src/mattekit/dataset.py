"""Composited matting datasets and training-time augmentation.

Images are ``(h, w, 3)`` float32 arrays in ``[0, 1]``; mattes are ``(h, w)``.
"""
from __future__ import annotations

import json
import logging
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import storage
from .tensor_core import bilinear_resize
from .trimap import UNKNOWN, make_trimap

logger = logging.getLogger(__name__)


@dataclass
class ForegroundAsset:
    fg_image: np.ndarray
    alpha: np.ndarray
    id: str

    def __post_init__(self):
        if self.fg_image.shape[:2] != self.alpha.shape:
            raise ValueError(
                f"foreground {self.id!r}: image {self.fg_image.shape} and "
                f"alpha {self.alpha.shape} differ"
            )
        if self.alpha.min() < 0.0 or self.alpha.max() > 1.0:
            raise ValueError(f"foreground {self.id!r}: alpha outside [0, 1]")


@dataclass
class CompositeSample:
    image: np.ndarray
    trimap: np.ndarray
    alpha: np.ndarray
    fg: np.ndarray
    bg: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def id(self):
        p = self.provenance
        return f"{p.get('fg_id', 'fg')}__{p.get('bg_id', 'bg')}__{p.get('index', 0)}"


@dataclass
class DatasetConfig:
    n_backgrounds: int = 100
    d_min: int = 1
    d_max: int = 25
    crop_sizes: Sequence[int] = (320, 480, 640)
    train_size: int = 320
    seed: int = 0
    max_bg_upscale: float = 8.0

    def __post_init__(self):
        if self.n_backgrounds < 1:
            raise ValueError("n_backgrounds must be >= 1")
        if not 0 <= self.d_min <= self.d_max:
            raise ValueError(f"need 0 <= d_min <= d_max, got {self.d_min}, {self.d_max}")
        if len(self.crop_sizes) == 0:
            raise ValueError("crop_sizes must not be empty")
        self.crop_sizes = tuple(int(c) for c in self.crop_sizes)


def _stable_hash(text):
    return zlib.crc32(text.encode("utf-8"))


def composite(fg, bg, alpha):
    """Blend ``fg`` over ``bg`` with per-pixel opacity ``alpha``."""
    fg, bg, alpha = np.asarray(fg), np.asarray(bg), np.asarray(alpha)
    if fg.shape != bg.shape or fg.shape[:2] != alpha.shape:
        raise ValueError(
            f"composite shape mismatch: fg {fg.shape}, bg {bg.shape}, alpha {alpha.shape}"
        )
    a = alpha[..., None]
    return np.clip(a * fg + (1.0 - a) * bg, 0.0, 1.0).astype(np.float32)


def resize_image(img, h, w):
    """Bilinear resize of an ``(h, w)`` or ``(h, w, c)`` array."""
    if img.ndim == 2:
        return bilinear_resize(img, h, w)
    return np.moveaxis(bilinear_resize(np.moveaxis(img, -1, 0), h, w), 0, -1)


def fit_background(bg, h, w, max_upscale=math.inf):
    """Scale ``bg`` (keeping aspect) to cover ``h x w`` and center-crop it.

    Returns None when covering would need more than ``max_upscale`` magnification.
    """
    bh, bw = bg.shape[:2]
    scale = max(h / bh, w / bw)
    if scale > max_upscale:
        return None
    nh, nw = max(h, math.ceil(bh * scale)), max(w, math.ceil(bw * scale))
    if (nh, nw) != (bh, bw):
        bg = resize_image(bg, nh, nw)
    top, left = (nh - h) // 2, (nw - w) // 2
    return np.ascontiguousarray(bg[top:top + h, left:left + w]).astype(np.float32)


def plan_dataset(fg_ids, n_bgs, cfg):
    """List ``(fg_id, bg_index, sample_index)`` triples, ``N`` per foreground.

    Backgrounds are sampled per foreground without replacement when enough
    are available.
    """
    if not fg_ids or n_bgs == 0:
        raise ValueError("need at least one foreground and one background")
    plan = []
    for fg_id in fg_ids:
        rng = np.random.default_rng([cfg.seed, _stable_hash(fg_id)])
        picks = rng.choice(n_bgs, cfg.n_backgrounds, replace=n_bgs < cfg.n_backgrounds)
        plan.extend((fg_id, int(b), k) for k, b in enumerate(picks))
    return plan


def _make_sample(asset, bg_img, bg_id, bg_index, k, cfg):
    h, w = asset.alpha.shape
    bg = fit_background(bg_img, h, w, cfg.max_bg_upscale)
    if bg is None:
        logger.warning("background %s too small for foreground %s; skipped", bg_id, asset.id)
        return None
    rng = np.random.default_rng([cfg.seed, _stable_hash(asset.id), bg_index, k])
    d = int(rng.integers(cfg.d_min, cfg.d_max + 1))
    fg = asset.fg_image.astype(np.float32)
    alpha = asset.alpha.astype(np.float32)
    return CompositeSample(
        image=composite(fg, bg, alpha),
        trimap=make_trimap(alpha, d),
        alpha=alpha,
        fg=fg,
        bg=bg,
        provenance={"fg_id": asset.id, "bg_id": bg_id, "index": k,
                    "seed": cfg.seed, "dilation": d},
    )


def synthesize_dataset(fgs, bgs, cfg, bg_ids=None, workers=1):
    """Composite every foreground onto ``cfg.n_backgrounds`` sampled backgrounds.

    ``bgs`` is a list of RGB arrays; ``bg_ids`` optionally names them. Each
    sample draws from its own RNG keyed by (seed, foreground, background,
    index), so the result does not depend on ``workers``.
    """
    if not fgs or not bgs:
        raise ValueError("need at least one foreground and one background")
    bg_ids = list(bg_ids) if bg_ids is not None else [f"bg{i}" for i in range(len(bgs))]
    by_id = {a.id: a for a in fgs}
    if len(by_id) != len(fgs):
        raise ValueError("foreground ids must be unique")
    plan = plan_dataset([a.id for a in fgs], len(bgs), cfg)

    def build(entry):
        fg_id, b, k = entry
        return _make_sample(by_id[fg_id], bgs[b], bg_ids[b], b, k, cfg)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(build, plan))
    else:
        samples = [build(e) for e in plan]
    return [s for s in samples if s is not None]


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------

def _flip(sample):
    return replace(
        sample,
        image=sample.image[:, ::-1].copy(),
        trimap=sample.trimap[:, ::-1].copy(),
        alpha=sample.alpha[:, ::-1].copy(),
        fg=sample.fg[:, ::-1].copy(),
        bg=sample.bg[:, ::-1].copy(),
    )


def augment_crop(sample, cfg, rng, dilation=None, flip=True):
    """Random unknown-centred crop, rescale to ``cfg.train_size`` and random flip.

    When the crop has to be resized, the layers are resampled bilinearly, the
    image is recomposited from them and the trimap is recomputed from the
    resized alpha with radius ``dilation`` (default: the sample's own).
    """
    ys, xs = np.nonzero(sample.trimap == UNKNOWN)
    if ys.size == 0:
        raise ValueError(f"sample {sample.id} has no unknown pixels to centre a crop on")
    size = int(cfg.crop_sizes[rng.integers(len(cfg.crop_sizes))])
    pick = rng.integers(ys.size)
    cy, cx = int(ys[pick]), int(xs[pick])
    h, w = sample.alpha.shape
    ch, cw = min(size, h), min(size, w)
    top = int(np.clip(cy - ch // 2, 0, h - ch))
    left = int(np.clip(cx - cw // 2, 0, w - cw))
    win = (slice(top, top + ch), slice(left, left + cw))

    t = cfg.train_size
    prov = dict(sample.provenance, crop=[top, left, ch, cw], center=[cy, cx])
    if (ch, cw) == (t, t):
        out = CompositeSample(
            image=sample.image[win].copy(), trimap=sample.trimap[win].copy(),
            alpha=sample.alpha[win].copy(), fg=sample.fg[win].copy(),
            bg=sample.bg[win].copy(), provenance=prov,
        )
    else:
        d = sample.provenance.get("dilation", cfg.d_min) if dilation is None else dilation
        alpha = np.clip(resize_image(sample.alpha[win], t, t), 0.0, 1.0)
        fg = resize_image(sample.fg[win], t, t)
        bg = resize_image(sample.bg[win], t, t)
        out = CompositeSample(
            image=composite(fg, bg, alpha), trimap=make_trimap(alpha, d),
            alpha=alpha, fg=fg, bg=bg, provenance=prov,
        )
    flipped = bool(flip and rng.random() < 0.5)
    out.provenance["flipped"] = flipped
    return _flip(out) if flipped else out


def regenerate_epoch(dataset, epoch, cfg, random_dilation=True):
    """Yield one freshly augmented copy of every sample, in a shuffled order.

    Randomness comes from a seed derived from ``(cfg.seed, epoch)``. With
    ``random_dilation`` each sample's trimap is first regenerated from its
    alpha with a radius drawn from ``[cfg.d_min, cfg.d_max]``.
    """
    if len(dataset) == 0:
        raise ValueError("cannot regenerate an empty dataset")
    rng = np.random.default_rng([cfg.seed, epoch])
    for i in rng.permutation(len(dataset)):
        sample = dataset[i]
        d = None
        if random_dilation:
            d = int(rng.integers(cfg.d_min, cfg.d_max + 1))
            trimap = make_trimap(sample.alpha, d)
            if not (trimap == UNKNOWN).any():
                trimap, d = sample.trimap, None
            sample = replace(sample, trimap=trimap,
                             provenance=dict(sample.provenance, epoch_dilation=d))
        yield augment_crop(sample, cfg, rng, dilation=d)


def one_per_foreground(dataset, seed=0):
    """Pick one random sample for each unique foreground id (sorted by id)."""
    groups = {}
    for s in dataset:
        groups.setdefault(s.provenance.get("fg_id", s.id), []).append(s)
    rng = np.random.default_rng(seed)
    return [groups[k][rng.integers(len(groups[k]))] for k in sorted(groups)]


# --------------------------------------------------------------------------
# disk layout
# --------------------------------------------------------------------------

def load_assets(fg_dir, bg_dir):
    """Read ``<id>_fg.png`` / ``<id>_alpha.png`` pairs and loose background images."""
    fg_dir, bg_dir = Path(fg_dir), Path(bg_dir)
    fgs = []
    for fg_path in sorted(fg_dir.glob("*_fg.png")):
        asset_id = fg_path.name[: -len("_fg.png")]
        alpha_path = fg_dir / f"{asset_id}_alpha.png"
        if not alpha_path.exists():
            raise ValueError(f"missing matte {alpha_path} for {fg_path}")
        fgs.append(ForegroundAsset(storage.read_image(fg_path),
                                   storage.read_matte(alpha_path), asset_id))
    bg_paths = sorted(p for p in bg_dir.iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg"})
    bgs = [storage.read_image(p) for p in bg_paths]
    return fgs, bgs, [p.stem for p in bg_paths]


def write_dataset(samples, out_dir):
    """One directory per sample plus ``manifest.json`` with provenance."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for s in samples:
        d = out_dir / s.id
        d.mkdir(exist_ok=True)
        storage.write_image(d / "image.png", s.image)
        storage.write_trimap(d / "trimap.png", s.trimap)
        storage.write_matte(d / "alpha.png", s.alpha)
        storage.write_image(d / "fg.png", s.fg)
        storage.write_image(d / "bg.png", s.bg)
        manifest.append({"dir": s.id, **s.provenance})
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out_dir / "manifest.json"


def read_dataset(root):
    """Load a directory written by :func:`write_dataset`.

    The image is recomposited from the stored layers so that the compositing
    identity holds exactly after 8-bit quantization.
    """
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    samples = []
    for entry in manifest:
        d = root / entry["dir"]
        fg = storage.read_image(d / "fg.png")
        bg = storage.read_image(d / "bg.png")
        alpha = storage.read_matte(d / "alpha.png")
        prov = {k: v for k, v in entry.items() if k != "dir"}
        samples.append(CompositeSample(
            image=composite(fg, bg, alpha), trimap=storage.read_trimap(d / "trimap.png"),
            alpha=alpha, fg=fg, bg=bg, provenance=prov,
        ))
    return samples


def toy_assets(n_fg, n_bg, size=64, seed=0):
    """Synthetic foregrounds (soft-edged ellipses with partial-alpha hair) and backgrounds.

    Used for desk-scale runs and tests when no real asset folder is at hand.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / (size - 1)
    fgs = []
    for i in range(n_fg):
        cy, cx = rng.uniform(0.35, 0.65, 2)
        ry, rx = rng.uniform(0.15, 0.3, 2)
        r = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
        soft = rng.uniform(0.1, 0.3)
        alpha = np.clip((1.0 + soft - r) / (2 * soft), 0.0, 1.0)
        # thin semi-transparent strands crossing the boundary
        strands = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(4, 9) * (xx + yy * rng.uniform(-1, 1)))
        band = (alpha > 0) & (alpha < 1)
        alpha = np.where(band, alpha * (0.6 + 0.4 * strands), alpha).astype(np.float32)
        base = rng.uniform(0.1, 0.9, 3).astype(np.float32)
        tex = 0.15 * np.sin(2 * np.pi * rng.uniform(1, 4) * xx)[..., None]
        fg = np.clip(base + tex * rng.uniform(-1, 1, 3), 0, 1).astype(np.float32)
        fgs.append(ForegroundAsset(fg, alpha, f"fg{i:03d}"))
    bgs = []
    for _ in range(n_bg):
        c0, c1 = rng.uniform(0, 1, (2, 3)).astype(np.float32)
        t = (0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(1, 6) * (xx * rng.uniform(-1, 1) + yy)))
        bg = c0 + (c1 - c0) * t[..., None]
        bgs.append(np.clip(bg, 0, 1).astype(np.float32))
    return fgs, bgs
