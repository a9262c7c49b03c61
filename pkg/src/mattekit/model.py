"""Two-stage matting network: encoder-decoder alpha predictor plus skip refinement.

Parameters live in an ordered ``dict`` of float32 arrays named
``s1.<layer>.w`` / ``s1.<layer>.b`` (stage 1) and ``s2.<layer>.*`` (stage 2).
Forward functions return ``(output, cache)``; the matching backward functions
return a dict of parameter gradients plus the gradient that flows into the
stage input where one exists.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .storage import config_fingerprint
from .tensor_core import (
    conv2d_backward,
    conv2d_forward,
    maxpool2x2_backward,
    maxpool2x2_forward,
    relu_backward,
    relu_forward,
    unpool2x2_backward,
    unpool2x2_forward,
    xavier_init,
    zero_extend_first_layer,
)
from .trimap import encode_trimap

# VGG-16 conv1_1 .. conv5_3 followed by fc6 realised as a 7x7 convolution
VGG_WIDTHS = (64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512, 4096)
VGG_POOL_AFTER = (1, 3, 6, 9, 12)


def _scale(width, multiplier):
    return max(1, int(round(width * multiplier)))


@dataclass
class Stage1Config:
    encoder_widths: tuple = VGG_WIDTHS
    pool_after: tuple = VGG_POOL_AFTER
    encoder_kernel: int = 3
    fc6_kernel: int = 7
    decoder_widths: tuple = (512, 512, 256, 128, 64, 64)
    decoder_kernel: int = 5
    pred_kernel: int = 5
    width_multiplier: float = 1.0

    def __post_init__(self):
        self.encoder_widths = tuple(self.encoder_widths)
        self.pool_after = tuple(self.pool_after)
        self.decoder_widths = tuple(self.decoder_widths)
        n_pools = len(self.pool_after)
        if len(self.decoder_widths) != n_pools + 1:
            raise ValueError(
                f"decoder needs {n_pools + 1} convs for {n_pools} unpools, "
                f"got {len(self.decoder_widths)}"
            )
        if sorted(self.pool_after) != list(self.pool_after) or (
            self.pool_after and self.pool_after[-1] >= len(self.encoder_widths) - 1
        ):
            raise ValueError("pool positions must be increasing and precede the last encoder conv")
        for k in (self.encoder_kernel, self.fc6_kernel, self.decoder_kernel, self.pred_kernel):
            if k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd, got {k}")
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")
        enc = self.scaled_encoder()
        dec = self.scaled_decoder()
        # the map fed to each unpool must have the channel count of the map that was pooled
        for j, conv_idx in enumerate(reversed(self.pool_after)):
            if dec[j] != enc[conv_idx]:
                raise ValueError(
                    f"decoder conv {j} width {dec[j]} must equal the width {enc[conv_idx]} "
                    f"of encoder conv {conv_idx} whose pooling it reverses"
                )

    @property
    def n_pools(self):
        return len(self.pool_after)

    def scaled_encoder(self):
        return tuple(_scale(w, self.width_multiplier) for w in self.encoder_widths)

    def scaled_decoder(self):
        return tuple(_scale(w, self.width_multiplier) for w in self.decoder_widths)


@dataclass
class Stage2Config:
    widths: tuple = (64, 64, 64, 1)
    kernel: int = 3
    width_multiplier: float = 1.0

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if len(self.widths) != 4 or self.widths[-1] != 1:
            raise ValueError(f"refinement stage needs 4 convs ending in 1 channel, got {self.widths}")
        if self.kernel % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.kernel}")
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")

    def scaled(self):
        return tuple(_scale(w, self.width_multiplier) for w in self.widths[:-1]) + (1,)


def stage1_layers(cfg):
    """``(name, out_ch, in_ch, kernel)`` for every stage-1 conv, in forward order."""
    layers = []
    in_ch = 4
    enc = cfg.scaled_encoder()
    for i, w in enumerate(enc):
        k = cfg.fc6_kernel if i == len(enc) - 1 else cfg.encoder_kernel
        layers.append((f"enc{i:02d}", w, in_ch, k))
        in_ch = w
    for j, w in enumerate(cfg.scaled_decoder()):
        layers.append((f"dec{j}", w, in_ch, cfg.decoder_kernel))
        in_ch = w
    layers.append(("pred", 1, in_ch, cfg.pred_kernel))
    return layers


def stage2_layers(cfg):
    layers = []
    in_ch = 4
    for i, w in enumerate(cfg.scaled()):
        layers.append((f"conv{i}", w, in_ch, cfg.kernel))
        in_ch = w
    return layers


@dataclass
class MattingModel:
    """Configs plus the named parameter tensors of both stages."""

    stage1: Stage1Config
    stage2: Stage2Config
    params: dict
    frozen: set = field(default_factory=set)

    def config_dict(self):
        return {"stage1": asdict(self.stage1), "stage2": asdict(self.stage2)}

    def fingerprint(self):
        return config_fingerprint(self.config_dict())

    def stage_params(self, stage):
        prefix = f"s{stage}."
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def n_parameters(self):
        return int(sum(v.size for v in self.params.values()))

    def copy(self, dtype=None):
        params = {k: v.astype(dtype or v.dtype, copy=True) for k, v in self.params.items()}
        return MattingModel(self.stage1, self.stage2, params, set(self.frozen))


def build_model(cfg1=None, cfg2=None, seed=0):
    """Xavier-initialised weights with zero biases; the first layer is zero-extended."""
    cfg1 = cfg1 or Stage1Config()
    cfg2 = cfg2 or Stage2Config()
    specs = [("s1", spec) for spec in stage1_layers(cfg1)] + [
        ("s2", spec) for spec in stage2_layers(cfg2)
    ]
    seeds = np.random.SeedSequence(seed).spawn(len(specs))
    params = {}
    for (stage, (name, out_ch, in_ch, k)), ss in zip(specs, seeds):
        if stage == "s1" and name == "enc00":
            w = zero_extend_first_layer(xavier_init((out_ch, 3, k, k), ss))
        else:
            w = xavier_init((out_ch, in_ch, k, k), ss)
        params[f"{stage}.{name}.w"] = w
        params[f"{stage}.{name}.b"] = np.zeros(out_ch, dtype=np.float32)
    return MattingModel(cfg1, cfg2, params)


# --------------------------------------------------------------------------
# input packing
# --------------------------------------------------------------------------

def to_nchw(image):
    """``(h, w, 3)`` or ``(n, h, w, 3)`` image(s) to an ``(n, 3, h, w)`` array."""
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[None]
    return np.ascontiguousarray(image.transpose(0, 3, 1, 2))


def trimap_channel(trimap):
    """Label map(s) to the ``(n, 1, h, w)`` network encoding."""
    enc = encode_trimap(trimap)
    if enc.ndim == 2:
        enc = enc[None]
    return enc[:, None]


def _pad_multiple(x, m):
    h, w = x.shape[2:]
    ph, pw = (-h) % m, (-w) % m
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")


def _clamp_forward(raw):
    return np.clip(raw, 0.0, 1.0), (raw >= 0.0) & (raw <= 1.0)


def _conv(params, key, x, cache_list):
    w = params[key + ".w"]
    out, cache = conv2d_forward(x, w, params[key + ".b"], 1, w.shape[2] // 2)
    cache_list.append(("conv", key, cache))
    return out


def _relu(x, cache_list):
    out, mask = relu_forward(x)
    cache_list.append(("relu", None, mask))
    return out


def _run_backward(ops, dout, grads, need_input_grad):
    for i in range(len(ops) - 1, -1, -1):
        kind, key, cache = ops[i]
        if kind == "conv":
            need_dx = need_input_grad or i > 0
            dout, gw, gb = conv2d_backward(dout, cache, need_dx=need_dx)
            grads[key + ".w"] = gw
            grads[key + ".b"] = gb
        elif kind == "relu":
            dout = relu_backward(dout, cache)
        elif kind == "pool":
            dout = maxpool2x2_backward(dout, cache)
        elif kind == "unpool":
            dout = unpool2x2_backward(dout, cache)
    return dout


# --------------------------------------------------------------------------
# stage 1
# --------------------------------------------------------------------------

def stage1_forward(model, image, trimap_enc):
    """Encoder-decoder prediction clamped to ``[0, 1]``.

    ``image`` is ``(n, 3, h, w)``, ``trimap_enc`` is ``(n, 1, h, w)`` with the
    {0, 0.5, 1} encoding. Inputs are edge-padded to a multiple of ``2**n_pools``
    and the prediction is cropped back to ``h x w``.
    """
    if image.shape[0] != trimap_enc.shape[0] or image.shape[2:] != trimap_enc.shape[2:]:
        raise ValueError(f"image {image.shape} and trimap {trimap_enc.shape} differ")
    if image.shape[1] != 3 or trimap_enc.shape[1] != 1:
        raise ValueError("stage 1 expects a 3-channel image and a 1-channel trimap")
    cfg, p = model.stage1, model.params
    h, w = image.shape[2:]
    x = np.concatenate([image, trimap_enc], axis=1).astype(p["s1.enc00.w"].dtype, copy=False)
    x = _pad_multiple(x, 2 ** cfg.n_pools)

    ops = []
    pools = []
    n_enc = len(cfg.encoder_widths)
    for i in range(n_enc):
        x = _relu(_conv(p, f"s1.enc{i:02d}", x, ops), ops)
        if i in cfg.pool_after:
            x, idx = maxpool2x2_forward(x)
            ops.append(("pool", None, idx))
            pools.append(idx)
    for j in range(len(cfg.decoder_widths)):
        x = _relu(_conv(p, f"s1.dec{j}", x, ops), ops)
        if j < len(pools):
            idx = pools[-1 - j]
            x = unpool2x2_forward(x, idx)
            ops.append(("unpool", None, idx))
    raw = _conv(p, "s1.pred", x, ops)
    padded_shape = raw.shape
    raw = raw[:, :, :h, :w]
    alpha, inside = _clamp_forward(raw)
    return alpha, (ops, inside, padded_shape)


def stage1_backward(dalpha, cache):
    """Parameter gradients of stage 1 given ``d loss / d alpha``."""
    ops, inside, padded_shape = cache
    draw = np.zeros(padded_shape, dtype=dalpha.dtype)
    h, w = inside.shape[2:]
    draw[:, :, :h, :w] = np.where(inside, dalpha, 0.0)
    grads = {}
    _run_backward(ops, draw, grads, need_input_grad=False)
    return grads


# --------------------------------------------------------------------------
# stage 2
# --------------------------------------------------------------------------

def stage2_forward(model, image, alpha_raw):
    """Refine ``alpha_raw`` with the skip network: ``clamp(alpha_raw + net(x))``.

    The network input is the image with ``alpha_raw * 255`` as fourth channel.
    """
    if image.shape[0] != alpha_raw.shape[0] or image.shape[2:] != alpha_raw.shape[2:]:
        raise ValueError(f"image {image.shape} and alpha {alpha_raw.shape} differ")
    p = model.params
    x = np.concatenate([image, alpha_raw * 255.0], axis=1).astype(p["s2.conv0.w"].dtype, copy=False)
    ops = []
    n = len(model.stage2.widths)
    for i in range(n):
        x = _conv(p, f"s2.conv{i}", x, ops)
        if i < n - 1:
            x = _relu(x, ops)
    refined, inside = _clamp_forward(alpha_raw + x)
    return refined, (ops, inside)


def stage2_backward(drefined, cache):
    """Return ``(grads, d loss / d alpha_raw)`` for the refinement stage."""
    ops, inside = cache
    dsum = np.where(inside, drefined, 0.0).astype(drefined.dtype)
    grads = {}
    dx = _run_backward(ops, dsum, grads, need_input_grad=True)
    dalpha_raw = dsum + 255.0 * dx[:, 3:4]
    return grads, dalpha_raw


def full_forward(model, image, trimap_enc):
    alpha_raw, c1 = stage1_forward(model, image, trimap_enc)
    refined, c2 = stage2_forward(model, image, alpha_raw)
    return refined, (alpha_raw, c1, c2)


def full_backward(drefined, cache, train_stage1=True):
    _, c1, c2 = cache
    grads, dalpha_raw = stage2_backward(drefined, c2)
    if train_stage1:
        grads.update(stage1_backward(dalpha_raw, c1))
    return grads


def predict(model, image, trimap, refine=True):
    """Alpha matte for one ``(h, w, 3)`` image and its label trimap."""
    x = to_nchw(image).astype(np.float32)
    t = trimap_channel(trimap)
    if refine:
        out, _ = full_forward(model, x, t)
    else:
        out, _ = stage1_forward(model, x, t)
    return out[0, 0]
