"""Matting error metrics (SAD, MSE, gradient, connectivity) and the trimap sweep."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .dataset import one_per_foreground
from .trimap import BG, FG, UNKNOWN, make_trimap

logger = logging.getLogger(__name__)

GRAD_SIGMA = 1.4
GRAD_POWER = 2
CONN_STEP = 0.1
CONN_THETA = 0.15
CONN_POWER = 1

METRIC_PARAMS = {
    "gradient": {"sigma": GRAD_SIGMA, "q": GRAD_POWER, "truncate_sigmas": 3},
    "connectivity": {"step": CONN_STEP, "theta": CONN_THETA, "q": CONN_POWER, "neighbourhood": 4},
    "sad_k": "sad_raw / 1000",
}


def _prepare(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {mask.shape}")
    if not mask.any():
        raise ValueError("metric needs a non-empty unknown region")
    return pred, gt, mask


def sad(pred, gt, unknown_mask):
    """Sum of absolute alpha differences over the unknown region (raw units)."""
    pred, gt, mask = _prepare(pred, gt, unknown_mask)
    return float(np.abs(pred - gt)[mask].sum())


def mse(pred, gt, unknown_mask):
    pred, gt, mask = _prepare(pred, gt, unknown_mask)
    return float(((pred - gt) ** 2)[mask].mean())


def gaussian_derivative_kernel(sigma=GRAD_SIGMA):
    """2-D kernel differentiating along columns and smoothing along rows.

    Support is truncated at ``ceil(3 * sigma)`` and the kernel is scaled to
    unit L2 norm. Its transpose differentiates along rows.
    """
    half = int(math.ceil(3 * sigma))
    u = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-u ** 2 / (2 * sigma ** 2)) / (sigma * np.sqrt(2 * np.pi))
    dg = -u * g / sigma ** 2
    k = np.outer(g, dg)
    return k / np.sqrt(np.sum(k * k))


def gradient_magnitude(alpha, sigma=GRAD_SIGMA):
    k = gaussian_derivative_kernel(sigma)
    gx = ndimage.convolve(alpha, k, mode="nearest")
    gy = ndimage.convolve(alpha, k.T, mode="nearest")
    return np.sqrt(gx * gx + gy * gy)


def gradient_error(pred, gt, unknown_mask, sigma=GRAD_SIGMA, q=GRAD_POWER):
    pred, gt, mask = _prepare(pred, gt, unknown_mask)
    diff = gradient_magnitude(pred, sigma) - gradient_magnitude(gt, sigma)
    return float((np.abs(diff) ** q)[mask].sum())


_FOUR = ndimage.generate_binary_structure(2, 1)


def largest_component(binary):
    """Largest 4-connected component; ties go to the component found first in scan order."""
    labels, n = ndimage.label(binary, structure=_FOUR)
    if n == 0:
        return np.zeros_like(binary, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def connection_levels(pred, gt, step=CONN_STEP):
    """Per pixel, the highest threshold level at which it still belongs to the source region.

    At each level ``t`` the source is the largest 4-connected component of
    ``(pred >= t) & (gt >= t)``. A pixel gets the level just below the first
    one at which it drops out of the source, or 1 if it never does.
    """
    n_levels = int(round(1.0 / step))
    levels = np.arange(n_levels + 1) / n_levels
    lvl = np.full(pred.shape, -1.0)
    for k in range(1, n_levels + 1):
        omega = largest_component((pred >= levels[k]) & (gt >= levels[k]))
        lvl[(lvl == -1.0) & ~omega] = levels[k - 1]
    lvl[lvl == -1.0] = 1.0
    return lvl


def connectivity_degree(alpha, levels, theta=CONN_THETA):
    d = alpha - levels
    return 1.0 - d * (d >= theta)


def connectivity_error(pred, gt, unknown_mask, step=CONN_STEP, theta=CONN_THETA, q=CONN_POWER):
    pred, gt, mask = _prepare(pred, gt, unknown_mask)
    levels = connection_levels(pred, gt, step)
    diff = connectivity_degree(pred, levels, theta) - connectivity_degree(gt, levels, theta)
    return float((np.abs(diff) ** q)[mask].sum())


def all_metrics(pred, gt, unknown_mask):
    raw = sad(pred, gt, unknown_mask)
    return {
        "sad_raw": raw,
        "sad_k": raw / 1000.0,
        "mse": mse(pred, gt, unknown_mask),
        "grad": gradient_error(pred, gt, unknown_mask),
        "conn": connectivity_error(pred, gt, unknown_mask),
    }


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

COLUMNS = ("image_id", "d", "sad_raw", "sad_k", "mse", "grad", "conn")
VALUE_COLUMNS = COLUMNS[2:]


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    params: dict = field(default_factory=lambda: json.loads(json.dumps(METRIC_PARAMS)))
    missing: list = field(default_factory=list)

    def aggregate(self):
        """Mean of every metric column, one entry per distinct ``d`` (None when not swept)."""
        groups = {}
        for row in self.rows:
            groups.setdefault(row["d"], []).append(row)
        out = []
        for d, rows in groups.items():
            agg = {"d": d, "n_images": len(rows)}
            for col in VALUE_COLUMNS:
                agg[col] = float(np.mean([r[col] for r in rows]))
            agg["n_missing"] = sum(1 for m in self.missing if m["d"] == d)
            out.append(agg)
        return out

    def to_json(self, path=None):
        doc = {"params": self.params, "rows": self.rows,
               "aggregate": self.aggregate(), "missing": self.missing}
        text = json.dumps(doc, indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# params: {json.dumps(self.params, sort_keys=True)}\n")
            writer = csv.DictWriter(fh, fieldnames=COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: ("" if row[k] is None else row[k]) for k in COLUMNS})


def _evaluate_one(args):
    image_id, d, pred, gt, trimap = args
    return {"image_id": image_id, "d": d, **all_metrics(pred, gt, trimap == UNKNOWN)}


def evaluate(preds, gts, trimaps, ids, workers=1):
    """Metrics for each ``(pred, gt, trimap)`` triple, rows ordered by image id."""
    jobs = sorted(zip(ids, [None] * len(ids), preds, gts, trimaps), key=lambda j: j[0])
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_evaluate_one, jobs))
    else:
        rows = [_evaluate_one(j) for j in jobs]
    return MetricsReport(rows=rows)


# --------------------------------------------------------------------------
# trimap dilation sweep
# --------------------------------------------------------------------------

@dataclass
class SweepConfig:
    d_list: tuple = (1, 4, 7, 10, 13, 16, 19)
    one_per_foreground: bool = True
    seed: int = 0

    def __post_init__(self):
        self.d_list = tuple(int(d) for d in self.d_list)
        if not self.d_list or any(b <= a for a, b in zip(self.d_list, self.d_list[1:])):
            raise ValueError(f"d_list must be non-empty and strictly increasing, got {self.d_list}")
        if self.d_list[0] < 0:
            raise ValueError("dilation radii must be non-negative")


def trimap_copy_predictor(image, trimap):
    """Baseline that trusts the trimap: 1 on FG, 0 on BG, 0.5 on UNKNOWN."""
    out = np.full(trimap.shape, 0.5, dtype=np.float32)
    out[trimap == FG] = 1.0
    out[trimap == BG] = 0.0
    return out


def trimap_sweep(predictor, dataset, cfg=None):
    """Re-derive every trimap at each radius in ``cfg.d_list`` and score ``predictor``.

    ``predictor(image, trimap) -> alpha``. Failures (exceptions, wrong shape,
    non-finite output) are recorded in ``report.missing`` and left out of the
    means.
    """
    cfg = cfg or SweepConfig()
    samples = one_per_foreground(dataset, cfg.seed) if cfg.one_per_foreground else list(dataset)
    report = MetricsReport()
    report.params["sweep"] = {"d_list": list(cfg.d_list), "n_images": len(samples)}
    for d in cfg.d_list:
        for s in samples:
            trimap = make_trimap(s.alpha, d)
            mask = trimap == UNKNOWN
            if not mask.any():
                report.missing.append({"image_id": s.id, "d": d, "reason": "empty unknown region"})
                continue
            try:
                pred = np.asarray(predictor(s.image, trimap), dtype=np.float64)
                if pred.shape != s.alpha.shape or not np.all(np.isfinite(pred)):
                    raise ValueError(f"bad prediction shape {pred.shape} or non-finite values")
            except Exception as exc:  # noqa: BLE001 - any predictor failure is recorded
                logger.warning("predictor failed on %s at d=%d: %s", s.id, d, exc)
                report.missing.append({"image_id": s.id, "d": d, "reason": str(exc)})
                continue
            report.rows.append({"image_id": s.id, "d": d, **all_metrics(pred, s.alpha, mask)})
    return report
