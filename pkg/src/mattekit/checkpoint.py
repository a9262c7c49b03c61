"""Model and optimizer state on top of the binary checkpoint container."""
from __future__ import annotations

from .model import MattingModel, Stage1Config, Stage2Config
from .storage import CheckpointError, load_checkpoint, save_checkpoint
from .tensor_core import Adam

_PARAM, _M, _V = "param/", "adam.m/", "adam.v/"


def save_model(path, model, optimizer=None, phase=None, step=0, extra=None):
    """Write parameters, Adam moments and training progress to ``path``."""
    tensors = {_PARAM + k: v for k, v in model.params.items()}
    meta = {"config": model.config_dict(), "phase": phase, "step": int(step)}
    if optimizer is not None:
        tensors.update({_M + k: v for k, v in optimizer.m.items()})
        tensors.update({_V + k: v for k, v in optimizer.v.items()})
        meta["adam"] = {"lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
                        "eps": optimizer.eps, "t": optimizer.t}
    if extra:
        meta["extra"] = extra
    save_checkpoint(path, tensors, model.fingerprint(), meta)


def load_model(path, expected=None):
    """Rebuild ``(model, optimizer_or_None, meta)`` from a checkpoint.

    If ``expected`` is a model (or anything with ``fingerprint()``), loading
    fails unless its configuration fingerprint matches the file's.
    """
    fp = expected.fingerprint() if expected is not None else None
    tensors, meta, stored = load_checkpoint(path, fp)
    try:
        cfg = meta["config"]
        model = MattingModel(Stage1Config(**cfg["stage1"]), Stage2Config(**cfg["stage2"]), {})
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: unusable model config in header: {exc}") from exc
    if model.fingerprint() != stored:
        raise CheckpointError(f"{path}: stored config does not hash to fingerprint {stored}")
    model.params = {k[len(_PARAM):]: v for k, v in tensors.items() if k.startswith(_PARAM)}
    optimizer = None
    if "adam" in meta:
        a = meta["adam"]
        optimizer = Adam(a["lr"], a["beta1"], a["beta2"], a["eps"])
        optimizer.t = a["t"]
        optimizer.m = {k[len(_M):]: v for k, v in tensors.items() if k.startswith(_M)}
        optimizer.v = {k[len(_V):]: v for k, v in tensors.items() if k.startswith(_V)}
    return model, optimizer, meta
