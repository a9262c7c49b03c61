"""PNG image I/O and the binary checkpoint format."""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .trimap import BG, FG, UNKNOWN

logger = logging.getLogger(__name__)

__all__ = [
    "read_image",
    "write_image",
    "read_matte",
    "write_matte",
    "snap_trimap",
    "read_trimap",
    "write_trimap",
    "CheckpointError",
    "config_fingerprint",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------

def _open(path):
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read image {path}: {exc}") from exc
    return img


def read_image(path):
    """Read an 8-bit RGB PNG as float32 ``(h, w, 3)`` in ``[0, 1]``."""
    img = _open(path)
    if img.mode != "RGB":
        raise ValueError(f"{path}: expected an RGB image, got mode {img.mode!r}")
    return np.asarray(img, dtype=np.float32) / 255.0


def write_image(path, rgb):
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (h, w, 3) image, got {rgb.shape}")
    data = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def read_matte(path):
    """Read an 8- or 16-bit grayscale PNG as float32 ``(h, w)`` in ``[0, 1]``."""
    img = _open(path)
    if img.mode == "L":
        scale = 255.0
    elif img.mode.startswith("I"):
        scale = 65535.0
    else:
        raise ValueError(f"{path}: expected a grayscale matte, got mode {img.mode!r}")
    return (np.asarray(img).astype(np.float64) / scale).astype(np.float32)


def write_matte(path, alpha, bits=16):
    alpha = np.clip(np.asarray(alpha, dtype=np.float64), 0.0, 1.0)
    if alpha.ndim != 2:
        raise ValueError(f"expected (h, w) matte, got {alpha.shape}")
    if bits == 16:
        Image.fromarray(np.round(alpha * 65535.0).astype(np.uint16)).save(path)
    elif bits == 8:
        Image.fromarray(np.round(alpha * 255.0).astype(np.uint8), mode="L").save(path)
    else:
        raise ValueError(f"bits must be 8 or 16, got {bits}")


def snap_trimap(values):
    """Snap raw 8-bit values to the nearest of {0, 128, 255}.

    Returns the label map and the number of pixels that had to move.
    """
    values = np.asarray(values).astype(np.int32)
    levels = np.array([BG, UNKNOWN, FG], dtype=np.int32)
    nearest = levels[np.abs(values[..., None] - levels).argmin(axis=-1)]
    return nearest.astype(np.uint8), int(np.count_nonzero(nearest != values))


def read_trimap(path):
    img = _open(path)
    if img.mode != "L":
        raise ValueError(f"{path}: expected an 8-bit grayscale trimap, got mode {img.mode!r}")
    trimap, n_snapped = snap_trimap(np.asarray(img))
    if n_snapped:
        logger.warning("%s: snapped %d trimap pixels to {0,128,255}", path, n_snapped)
    return trimap


def write_trimap(path, trimap):
    Image.fromarray(np.asarray(trimap, dtype=np.uint8), mode="L").save(path)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------
#
# layout (all integers little-endian):
#   magic           8 bytes  b"MATTEKIT"
#   version         u32
#   fingerprint     32 bytes ascii hex (sha256 prefix of the model config)
#   header_len      u32
#   header          utf-8 JSON: {"meta": {...}, "tensors": [{name, shape, offset, nbytes}]}
#   payload         float32 little-endian blobs at the listed offsets

CHECKPOINT_MAGIC = b"MATTEKIT"
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct("<8sI32sI")


class CheckpointError(ValueError):
    pass


def config_fingerprint(config):
    """Stable 32-hex-digit digest of a JSON-serializable model configuration."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:32]


def save_checkpoint(path, tensors, fingerprint, meta=None):
    """Write named float32 tensors. ``tensors`` keeps its iteration order."""
    directory = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append(
            {"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)}
        )
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"meta": meta or {}, "tensors": directory}).encode()
    with open(path, "wb") as fh:
        fh.write(_PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                                fingerprint.encode("ascii"), len(header)))
        fh.write(header)
        for data in blobs:
            fh.write(data)


def load_checkpoint(path, fingerprint=None):
    """Read a checkpoint; returns ``(tensors, meta, fingerprint)``.

    If ``fingerprint`` is given it must match the stored one.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _PREAMBLE.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, stored_fp, header_len = _PREAMBLE.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )
    stored_fp = stored_fp.decode("ascii")
    if fingerprint is not None and stored_fp != fingerprint:
        raise CheckpointError(
            f"{path}: config fingerprint mismatch (file {stored_fp}, model {fingerprint})"
        )
    start = _PREAMBLE.size
    if len(raw) < start + header_len:
        raise CheckpointError(f"{path}: truncated tensor directory")
    try:
        header = json.loads(raw[start:start + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt tensor directory: {exc}") from exc
    payload = memoryview(raw)[start + header_len:]
    tensors = {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        lo, n = entry["offset"], entry["nbytes"]
        if n != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: tensor {name!r} size does not match shape {shape}")
        if lo + n > len(payload):
            raise CheckpointError(f"{path}: truncated payload in tensor {name!r}")
        tensors[name] = (
            np.frombuffer(payload[lo:lo + n], dtype="<f4").astype(np.float32).reshape(shape)
        )
    return tensors, header["meta"], stored_fp
