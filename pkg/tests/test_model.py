import numpy as np
import pytest

from mattekit.losses import overall_loss
from mattekit.model import (
    Stage1Config,
    Stage2Config,
    build_model,
    full_backward,
    full_forward,
    predict,
    stage1_forward,
    stage1_layers,
    stage2_forward,
    stage2_layers,
    to_nchw,
    trimap_channel,
)

TOY = dict(width_multiplier=0.125)


def _toy(seed=0, dtype=np.float64):
    return build_model(Stage1Config(**TOY), Stage2Config(**TOY), seed=seed).copy(dtype)


def _inputs(r, n=1, h=32, w=32, dtype=np.float64):
    image = r.random((n, 3, h, w)).astype(dtype)
    labels = r.choice([0, 128, 255], size=(n, h, w)).astype(np.uint8)
    return image, trimap_channel(labels).astype(dtype), labels


# ------------------------------------------------------------------ replay oracle

def _conv_ref(x, w, b):
    """Direct convolution as a sum of shifted slices, zero 'same' padding."""
    k = w.shape[2]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    h, wd = x.shape[2:]
    out = np.zeros((x.shape[0], w.shape[0], h, wd))
    for i in range(k):
        for j in range(k):
            out += np.einsum("nchw,oc->nohw", xp[:, :, i:i + h, j:j + wd], w[:, :, i, j])
    return out + b[None, :, None, None]


def _pool_ref(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(-1)
    return win.max(-1), arg


def _unpool_ref(x, arg):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h, 2, w, 2))
    dy, dx = np.divmod(arg, 2)
    for a in range(2):
        for b in range(2):
            out[:, :, :, a, :, b] = np.where((dy == a) & (dx == b), x, 0.0)
    return out.reshape(n, c, 2 * h, 2 * w)


def _stage1_ref(model, image, tri):
    p, cfg = model.params, model.stage1
    x = np.concatenate([image, tri], axis=1)
    args = []
    for i in range(len(cfg.encoder_widths)):
        x = np.maximum(_conv_ref(x, p[f"s1.enc{i:02d}.w"], p[f"s1.enc{i:02d}.b"]), 0)
        if i in cfg.pool_after:
            x, a = _pool_ref(x)
            args.append(a)
    for j in range(len(cfg.decoder_widths)):
        x = np.maximum(_conv_ref(x, p[f"s1.dec{j}.w"], p[f"s1.dec{j}.b"]), 0)
        if j < len(args):
            x = _unpool_ref(x, args[-1 - j])
    return np.clip(_conv_ref(x, p["s1.pred.w"], p["s1.pred.b"]), 0, 1)


def _stage2_ref(model, image, alpha):
    p = model.params
    x = np.concatenate([image, alpha * 255.0], axis=1)
    for i in range(4):
        x = _conv_ref(x, p[f"s2.conv{i}.w"], p[f"s2.conv{i}.b"])
        if i < 3:
            x = np.maximum(x, 0)
    return np.clip(alpha + x, 0, 1)


def _lively(model, r):
    """Random weights scaled so activations stay O(1) through the deep stack."""
    for k, v in model.params.items():
        if k.endswith(".w"):
            fan_in = v.shape[1] * v.shape[2] * v.shape[3]
            model.params[k] = r.normal(0, np.sqrt(2.0 / fan_in), v.shape)
        else:
            model.params[k] = r.normal(0, 0.05, v.shape)
    model.params["s1.pred.b"][:] = 0.5
    return model


# ------------------------------------------------------------------ construction

def test_full_scale_layer_counts():
    cfg1, cfg2 = Stage1Config(), Stage2Config()
    names = [name for name, *_ in stage1_layers(cfg1)]
    assert sum(n.startswith("enc") for n in names) == 14
    assert cfg1.n_pools == 5
    assert sum(n.startswith("dec") for n in names) == 6
    assert names[-1] == "pred" and stage1_layers(cfg1)[-1][1] == 1
    assert stage1_layers(cfg1)[0][2] == 4
    assert len(stage2_layers(cfg2)) == 4
    assert stage1_layers(cfg1)[13][3] == 7


def test_width_multiplier_shrinks_model():
    small = build_model(Stage1Config(width_multiplier=0.25), Stage2Config(width_multiplier=0.25))
    assert small.n_parameters() < build_model(Stage1Config(width_multiplier=0.5)).n_parameters()
    full = sum(o * i * k * k + o for _, o, i, k in stage1_layers(Stage1Config()))
    assert small.n_parameters() < full


def test_same_seed_bitwise_identical():
    a, b = build_model(Stage1Config(**TOY), seed=3), build_model(Stage1Config(**TOY), seed=3)
    c = build_model(Stage1Config(**TOY), seed=4)
    assert list(a.params) == list(b.params)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert not np.array_equal(a.params["s1.enc01.w"], c.params["s1.enc01.w"])


def test_init_properties():
    m = build_model(Stage1Config(**TOY), Stage2Config(**TOY), seed=0)
    assert all(np.all(v == 0) for k, v in m.params.items() if k.endswith(".b"))
    assert np.all(m.params["s1.enc00.w"][:, 3] == 0)
    assert all(v.dtype == np.float32 and np.all(np.isfinite(v)) for v in m.params.values())
    assert m.fingerprint() == build_model(Stage1Config(**TOY), Stage2Config(**TOY)).fingerprint()
    assert m.fingerprint() != build_model(Stage1Config(width_multiplier=0.25)).fingerprint()


@pytest.mark.parametrize("kwargs", [
    dict(decoder_widths=(512, 256, 128, 64, 64)),
    dict(decoder_widths=(512, 256, 128, 64, 64, 64)),
    dict(encoder_kernel=4),
    dict(width_multiplier=0),
])
def test_invalid_stage1_config(kwargs):
    with pytest.raises(ValueError):
        Stage1Config(**kwargs)


def test_invalid_stage2_config():
    with pytest.raises(ValueError):
        Stage2Config(widths=(64, 64, 1))
    with pytest.raises(ValueError):
        Stage2Config(widths=(64, 64, 64, 2))


# ------------------------------------------------------------------ forward

def test_zero_weights_give_zero(rng):
    m = _toy()
    for k in m.params:
        m.params[k][...] = 0
    image, tri, _ = _inputs(rng)
    alpha, _ = stage1_forward(m, image, tri)
    assert alpha.shape == (1, 1, 32, 32)
    np.testing.assert_array_equal(alpha, 0.0)


@pytest.mark.parametrize("seed", range(2))
def test_stage1_matches_primitive_replay(seed):
    r = np.random.default_rng(seed)
    m = _lively(_toy(seed), r)
    image, tri, _ = _inputs(r, n=2)
    got, _ = stage1_forward(m, image, tri)
    assert 0 < got.mean() < 1
    assert np.max(np.abs(got - _stage1_ref(m, image, tri))) <= 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_stage2_matches_primitive_replay(seed):
    r = np.random.default_rng(seed)
    m = _toy(seed)
    image = r.random((2, 3, 11, 13))
    alpha = r.random((2, 1, 11, 13))
    got, _ = stage2_forward(m, image, alpha)
    assert got.min() >= 0 and got.max() <= 1
    assert np.max(np.abs(got - _stage2_ref(m, image, alpha))) <= 1e-6


def test_stage2_zero_params_is_identity(rng):
    m = _toy()
    for k in m.stage_params(2):
        m.params[k][...] = 0
    alpha = rng.random((1, 1, 9, 9))
    out, _ = stage2_forward(m, rng.random((1, 3, 9, 9)), alpha)
    np.testing.assert_array_equal(out, alpha)


def test_skip_identity_full_equals_stage1(rng):
    m = _lively(_toy(), rng)
    for k in m.stage_params(2):
        m.params[k][...] = 0
    image, tri, _ = _inputs(rng)
    np.testing.assert_array_equal(full_forward(m, image, tri)[0], stage1_forward(m, image, tri)[0])


def test_full_is_composition_and_deterministic(rng):
    m = _lively(_toy(), rng)
    image, tri, _ = _inputs(rng)
    a1, _ = stage1_forward(m, image, tri)
    composed, _ = stage2_forward(m, image, a1)
    full, _ = full_forward(m, image, tri)
    np.testing.assert_array_equal(full, composed)
    np.testing.assert_array_equal(full, full_forward(m, image, tri)[0])


def test_odd_shape_pad_and_crop(rng):
    m = _toy(dtype=np.float32)
    image = rng.random((67, 53, 3)).astype(np.float32)
    labels = rng.choice([0, 128, 255], size=(67, 53)).astype(np.uint8)
    out = predict(m, image, labels)
    assert out.shape == (67, 53)
    assert np.all(np.isfinite(out)) and out.min() >= 0 and out.max() <= 1
    assert predict(m, image, labels, refine=False).shape == (67, 53)


def test_dimension_mismatch_rejected(rng):
    m = _toy()
    with pytest.raises(ValueError):
        stage1_forward(m, rng.random((1, 3, 8, 8)), rng.random((1, 1, 8, 9)))
    with pytest.raises(ValueError):
        stage2_forward(m, rng.random((1, 3, 8, 8)), rng.random((1, 1, 9, 8)))


def test_trimap_channel_invariance_at_init(rng):
    m = build_model(Stage1Config(**TOY), Stage2Config(**TOY), seed=5)
    image = to_nchw(rng.random((32, 32, 3)).astype(np.float32))
    t1 = trimap_channel(rng.choice([0, 128, 255], size=(32, 32)).astype(np.uint8))
    t2 = trimap_channel(np.full((32, 32), 255, np.uint8))
    np.testing.assert_array_equal(stage1_forward(m, image, t1)[0], stage1_forward(m, image, t2)[0])


# ------------------------------------------------------------------ gradients

def test_end_to_end_gradient_check():
    """Every parameter tensor, sampled entries, float64 central differences."""
    r = np.random.default_rng(7)
    m = _lively(_toy(7), r)
    # keep the refinement residual small so the final clamp stays mostly inactive
    m.params["s2.conv3.w"] *= 0.01
    image, tri, labels = _inputs(r, n=1, h=16, w=16)
    alpha = r.random((1, 1, 16, 16))
    fg, bg = r.random((1, 3, 16, 16)), r.random((1, 3, 16, 16))
    batch = {"alpha": alpha, "fg": fg, "bg": bg, "image": image, "mask": labels[:, None] == 128}

    def loss_fn():
        out, _ = full_forward(m, image, tri)
        return overall_loss(out, batch)[0]

    out, cache = full_forward(m, image, tri)
    assert 0.05 < out.mean() < 0.95
    _, dout, _ = overall_loss(out, batch)
    grads = full_backward(dout, cache)
    assert set(grads) == set(m.params)

    h = 1e-6
    worst = {}
    for name, param in m.params.items():
        flat = param.reshape(-1)
        idx = r.choice(flat.size, size=min(4, flat.size), replace=False)
        num = np.empty(len(idx))
        for t, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            lp = loss_fn()
            flat[i] = old - h
            lm = loss_fn()
            flat[i] = old
            num[t] = (lp - lm) / (2 * h)
        ana = grads[name].reshape(-1)[idx]
        denom = max(np.linalg.norm(ana) + np.linalg.norm(num), 1e-10)
        worst[name] = np.linalg.norm(ana - num) / denom
    bad = {k: v for k, v in worst.items() if v > 1e-2}
    assert not bad, bad
