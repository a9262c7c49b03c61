"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .trimap import BG, FG, UNKNOWN


def check_image(image, name="image"):
    """Finite ``(h, w, 3)`` float32 array with values in ``[0, 1]``."""
    arr = check_array(image, dtype=np.float32, ensure_2d=False, allow_nd=True,
                      ensure_all_finite=True, input_name=name)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (h, w, 3), got {arr.shape}")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_matte(alpha, name="alpha"):
    arr = check_array(alpha, dtype=np.float32, ensure_all_finite=True, input_name=name)
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_trimap(trimap, shape=None, name="trimap"):
    """Label map with values in {0, 128, 255}, optionally of a given ``(h, w)``."""
    arr = np.asarray(trimap)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name} shape {arr.shape} does not match image {tuple(shape)}")
    bad = ~np.isin(arr, (BG, UNKNOWN, FG))
    if bad.any():
        raise ValueError(f"{name} has {int(bad.sum())} pixels outside {{0, 128, 255}}")
    return arr.astype(np.uint8)


def check_sample_lists(images, trimaps, alphas=None):
    """Validate parallel lists of images, trimaps and (optionally) mattes."""
    images = list(images)
    trimaps = list(trimaps)
    if len(images) != len(trimaps) or (alphas is not None and len(alphas) != len(images)):
        raise ValueError("images, trimaps and mattes must have the same length")
    if not images:
        raise ValueError("need at least one sample")
    images = [check_image(im, f"image[{i}]") for i, im in enumerate(images)]
    trimaps = [check_trimap(t, im.shape[:2], f"trimap[{i}]") for i, (t, im) in enumerate(zip(trimaps, images))]
    if alphas is None:
        return images, trimaps, None
    alphas = [check_matte(a, f"alpha[{i}]") for i, a in enumerate(alphas)]
    for i, (a, im) in enumerate(zip(alphas, images)):
        if a.shape != im.shape[:2]:
            raise ValueError(f"alpha[{i}] shape {a.shape} does not match image {im.shape[:2]}")
    return images, trimaps, alphas
