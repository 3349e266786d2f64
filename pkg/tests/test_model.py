import dataclasses
import math

import numpy as np
import pytest

from picnet import model as M
from picnet import tensor as T
from picnet.errors import ConfigError, ShapeError
from picnet.gradcheck import E2E_TOL, CONV_TOL, check_fn, model_cases, tiny_batch, tiny_config
from picnet.tensor import Tensor


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# -- config ----------------------------------------------------------------------------------


def test_config_defaults_and_tokens():
    cfg = M.ModelConfig()
    assert (cfg.n_pca, cfg.patch, cfg.n_fim, cfg.c_h, cfg.c_x, cfg.d_model) == (30, 14, 4, 32, 32, 64)
    assert cfg.lambda1 == cfg.lambda2 == 0.1
    assert cfg.se_reduction == 4
    assert cfg.tokens == 196
    assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("bad", [dict(n_fim=0), dict(patch=7), dict(patch=2), dict(c_h=30, c_x=30),
                                 dict(d_model=30), dict(n_classes=1)])
def test_config_validation(bad):
    with pytest.raises((ConfigError, ShapeError)):
        M.ModelConfig(**bad)


def test_odd_patch_message_names_rule():
    with pytest.raises(ConfigError, match="even"):
        M.ModelConfig(patch=7)


def test_parameter_count_and_names():
    model = M.PicnetModel(M.ModelConfig(n_classes=8))
    n = model.parameter_count()
    assert n == sum(p.data.size for p in model.params.values())
    assert n > 100_000
    assert len(set(model.params)) == len(model.params)
    assert model.params["proto.h"].shape == (196, 64)


# -- frequency separation --------------------------------------------------------------------------


def test_freq_constant_is_pure_low():
    f_l, f_h = M.freq_separate(t(np.full((1, 2, 6, 5), 1.7)))
    assert np.all(f_l.data == 1.7)
    assert np.all(f_h.data == 0.0)


def test_freq_checkerboard_is_pure_high():
    board = np.where((np.add.outer(np.arange(6), np.arange(8)) % 2) == 0, 1.0, -1.0)[None, None]
    f_l, f_h = M.freq_separate(t(board))
    assert np.all(f_l.data == 0.0)
    np.testing.assert_array_equal(f_h.data, board)


def test_freq_reconstruction_identity():
    x = np.random.default_rng(0).normal(size=(2, 3, 8, 8))
    f_l, f_h = M.freq_separate(t(x))
    assert f_l.shape == (2, 3, 4, 4)
    rec = T.bilinear_upsample(f_l, 8, 8).data + f_h.data
    assert np.max(np.abs(rec - x)) < 1e-12


def test_freq_rejects_1x1():
    with pytest.raises(ShapeError):
        M.freq_separate(t(np.ones((1, 1, 1, 1))))


def test_enhance_high_cases():
    rng = np.random.default_rng(1)
    x = t(rng.normal(size=(2, 3, 4, 4)))
    np.testing.assert_array_equal(M.enhance_high(x, {"dw": t(np.zeros((3, 1, 3, 3)))}).data, x.data)
    w = t(rng.normal(size=(3, 1, 3, 3)))
    assert np.all(M.enhance_high(t(np.zeros((2, 3, 4, 4))), {"dw": w}).data == 0)
    ref = x.data + T.depthwise_conv2d(x, w, pad=1).data
    np.testing.assert_array_equal(M.enhance_high(x, {"dw": w}).data, ref)


def _se_params(rng, c, r, b2=None):
    return {"se.w1": t(rng.normal(size=(c, c // r))), "se.b1": t(np.zeros(c // r)),
            "se.w2": t(rng.normal(size=(c // r, c))),
            "se.b2": t(np.full(c, b2) if b2 is not None else rng.normal(size=c))}


def test_refine_low_cases():
    rng = np.random.default_rng(2)
    x = t(rng.normal(size=(2, 8, 3, 3)))
    np.testing.assert_allclose(M.refine_low(x, _se_params(rng, 8, 4, b2=50.0)).data, x.data, rtol=1e-15)
    assert np.all(M.refine_low(t(np.zeros((2, 8, 3, 3))), _se_params(rng, 8, 4)).data == 0)
    p = _se_params(rng, 8, 4)
    g = x.data.mean(axis=(2, 3))
    gate = 1 / (1 + np.exp(-(np.maximum(g @ p["se.w1"].data + p["se.b1"].data, 0) @ p["se.w2"].data + p["se.b2"].data)))
    np.testing.assert_allclose(M.refine_low(x, p).data, x.data * gate[:, :, None, None], rtol=1e-13)


def _fim_params(cfg, seed=0):
    return M._sub(M.PicnetModel(cfg, seed=seed).params, "fim0")


def test_fim_zero_aux_reduces_sums():
    """With a zero aux input the fused bands equal the HSI bands alone."""
    cfg = tiny_config(c_h=4, c_x=4)
    p = _fim_params(cfg)
    rng = np.random.default_rng(3)
    fh = t(rng.normal(size=(2, 4, 4, 4)))
    zero = t(np.zeros((2, 4, 4, 4)))
    hp, xp = M._sub(p, "h"), M._sub(p, "x")
    hl, hh = M.freq_separate(fh)
    hh = M.enhance_high(hh, hp)
    hl = M.refine_low(hl, hp)
    stacked = np.concatenate([T.bilinear_upsample(hl, 4, 4).data, hh.data], axis=1).reshape(2, 2, 4, 4, 4)
    want_h = T.conv3d(t(stacked), hp["mix.w"], hp["mix.b"], pad=1).data.reshape(2, 4, 4, 4)
    # aux branch: its low band is zero, its high band is the HSI high band
    want_x = T.conv2d(t(np.concatenate([np.zeros((2, 4, 4, 4)), hh.data], axis=1)), xp["mix.w"], xp["mix.b"], pad=1).data
    out_h, out_x = M.fim_forward(fh, zero, p)
    np.testing.assert_allclose(out_h.data, want_h, rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(out_x.data, want_x, rtol=1e-13, atol=1e-14)


def test_fim_constant_inputs_have_no_high_band():
    cfg = tiny_config()
    p = _fim_params(cfg)
    _, xh = M.freq_separate(t(np.full((1, 4, 4, 4), 0.3)))
    hh = M.enhance_high(xh, M._sub(p, "h"))
    assert np.all(hh.data == 0)
    out_h, out_x = M.fim_forward(t(np.full((1, 4, 4, 4), 0.3)), t(np.full((1, 4, 4, 4), -2.0)), p)
    assert out_h.shape == out_x.shape == (1, 4, 4, 4)


def test_fim_channel_mismatch():
    cfg = tiny_config()
    with pytest.raises(ShapeError):
        M.fim_forward(t(np.ones((1, 4, 4, 4))), t(np.ones((1, 8, 4, 4))), _fim_params(cfg))


# -- encoder ---------------------------------------------------------------------------------


@pytest.mark.parametrize("over", [dict(), dict(patch=6, n_fim=2), dict(use_fim=False), dict(c_aux=3)])
def test_encoder_token_shapes(over):
    cfg = tiny_config(**over)
    model = M.PicnetModel(cfg)
    x_h, x_x, _ = tiny_batch(cfg, np.random.default_rng(0), bsz=3)
    f_h, f_x = M.encoder_forward(x_h, x_x, model)
    assert f_h.shape == f_x.shape == (3, cfg.patch ** 2, cfg.d_model)


def test_encoder_rejects_bad_input_shape():
    cfg = tiny_config()
    model = M.PicnetModel(cfg)
    with pytest.raises(ShapeError):
        M.encoder_forward(t(np.zeros((1, 1, 5, 4, 4))), t(np.zeros((1, 1, 4, 4))), model)


# -- attention -----------------------------------------------------------------------------------


def _attention_oracle(proto, feats, wq, wk, wv):
    """Per-sample, per-query loops with an explicit softmax."""
    bsz, n_tok, d = feats.shape
    out = np.zeros((bsz, proto.shape[0], d))
    attn = np.zeros((bsz, proto.shape[0], n_tok))
    for b in range(bsz):
        keys = [feats[b, j] @ wk for j in range(n_tok)]
        vals = [feats[b, j] @ wv for j in range(n_tok)]
        for i in range(proto.shape[0]):
            q = proto[i] @ wq
            s = np.array([q @ k for k in keys]) / math.sqrt(d)
            e = np.exp(s - s.max())
            a = e / e.sum()
            attn[b, i] = a
            out[b, i] = sum(a[j] * vals[j] for j in range(n_tok))
    return out, attn


def _attn_params(rng, d):
    return {k: t(rng.normal(size=(d, d)) / math.sqrt(d)) for k in ("wq", "wk", "wv")}


@pytest.mark.parametrize("seed", range(5))
def test_cross_attend_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    proto, feats = rng.normal(size=(4, 8)), rng.normal(size=(3, 4, 8))
    p = _attn_params(rng, 8)
    out, attn = M.cross_attend(t(proto), t(feats), p)
    ref_out, ref_attn = _attention_oracle(proto, feats, p["wq"].data, p["wk"].data, p["wv"].data)
    np.testing.assert_allclose(out.data, ref_out, rtol=0, atol=1e-12)
    np.testing.assert_allclose(attn.data, ref_attn, rtol=0, atol=1e-12)


def test_single_token_returns_values():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(2, 1, 8))
    p = _attn_params(rng, 8)
    out, attn = M.cross_attend(t(rng.normal(size=(1, 8)) * 50), t(feats), p)
    assert np.all(attn.data == 1.0)
    values = (feats.reshape(2, 8) @ p["wv"].data).reshape(2, 1, 8)
    np.testing.assert_array_equal(out.data, values)


def test_zero_query_weights_average_values():
    rng = np.random.default_rng(2)
    feats = rng.normal(size=(2, 5, 4))
    p = _attn_params(rng, 4)
    p["wq"] = t(np.zeros((4, 4)))
    out, _ = M.cross_attend(t(rng.normal(size=(5, 4))), t(feats), p)
    mean_v = (feats @ p["wv"].data).mean(axis=1, keepdims=True)
    np.testing.assert_allclose(out.data, np.repeat(mean_v, 5, axis=1), rtol=1e-13)


def test_prototype_token_mismatch():
    rng = np.random.default_rng(3)
    with pytest.raises(ShapeError):
        M.cross_attend(t(np.ones((3, 4))), t(rng.normal(size=(1, 4, 4))), _attn_params(rng, 4))


def test_picm_sums_and_directions():
    rng = np.random.default_rng(4)
    f_h, f_x = t(rng.normal(size=(2, 4, 8))), t(rng.normal(size=(2, 4, 8)))
    ap = {f"{d}.{k}": v for d in ("x", "h") for k, v in _attn_params(rng, 8).items()}
    protos = M.Prototypes(t(rng.normal(size=(4, 8))), t(rng.normal(size=(4, 8))))
    i_h, i_x, f_hat_x, f_hat_h, attn_x, attn_h = M.picm_forward(f_h, f_x, protos, ap)
    # aux prototypes query the HSI tokens, and vice versa
    ref_x, _ = M.cross_attend(protos.p_x, f_h, M._sub(ap, "x"))
    ref_h, _ = M.cross_attend(protos.p_h, f_x, M._sub(ap, "h"))
    np.testing.assert_array_equal(f_hat_x.data, ref_x.data)
    np.testing.assert_array_equal(f_hat_h.data, ref_h.data)
    np.testing.assert_array_equal(i_h.data, f_h.data + f_hat_x.data)
    np.testing.assert_array_equal(i_x.data, f_x.data + f_hat_h.data)
    for a in (attn_x, attn_h):
        np.testing.assert_allclose(a.data.sum(axis=-1), 1.0, atol=1e-12)


def test_all_ones_prototypes_give_identical_rows():
    cfg = tiny_config()
    model = M.PicnetModel(cfg, seed=5)
    x_h, x_x, _ = tiny_batch(cfg, np.random.default_rng(5), bsz=3)
    out = model.forward(x_h, x_x)
    for f_hat in (out.f_hat_x, out.f_hat_h):
        for b in range(3):
            np.testing.assert_array_equal(f_hat.data[b], np.broadcast_to(f_hat.data[b, :1], f_hat.data[b].shape))


# -- head and losses -------------------------------------------------------------------------------


def test_head_shape_and_class_permutation():
    cfg = tiny_config(n_classes=5)
    model = M.PicnetModel(cfg, seed=6)
    rng = np.random.default_rng(6)
    i_h, i_x = t(rng.normal(size=(3, 16, 8))), t(rng.normal(size=(3, 16, 8)))
    head = M._sub(model.params, "head")
    logits = M.refine_head(i_h, i_x, head, 4)
    assert logits.shape == (3, 5)
    perm = rng.permutation(5)
    swapped = dict(head, **{"fc.w": t(head["fc.w"].data[:, perm]), "fc.b": t(head["fc.b"].data[perm])})
    np.testing.assert_allclose(M.refine_head(i_h, i_x, swapped, 4).data, logits.data[:, perm], rtol=1e-14)


def test_consistency_loss_cases():
    rng = np.random.default_rng(7)
    f = t(rng.normal(size=(2, 4, 3)))
    assert M.consistency_loss(f, f).item() == 0.0
    diff = np.zeros((1, 4, 3))
    diff[0, 2, 0], diff[0, 3, 2] = 3.0, 4.0
    assert M.consistency_loss(t(diff), t(np.zeros((1, 4, 3)))).item() == 5.0
    g = rng.normal(size=(2, 4, 3))
    want = np.mean([np.sqrt(((f.data[b] - g[b]) ** 2).sum()) for b in range(2)])
    assert M.consistency_loss(f, t(g)).item() == pytest.approx(want, rel=1e-12)
    with pytest.raises(ShapeError):
        M.consistency_loss(f, t(np.zeros((2, 4, 4))))


def test_total_loss_composition():
    rng = np.random.default_rng(8)
    logits, labels = t(rng.normal(size=(2, 3))), [0, 2]
    f_h, f_x, g_h, g_x = (t(rng.normal(size=(2, 4, 3))) for _ in range(4))
    ce = T.cross_entropy(logits, labels).item()
    assert M.total_loss(logits, labels, f_h, f_x, g_h, g_x, 0.0, 0.0).item() == ce
    assert M.total_loss(logits, labels, f_h, f_x, f_h, f_x, 0.3, 0.7).item() == ce
    want = ce + 0.3 * M.consistency_loss(f_x, g_x).item() + 0.7 * M.consistency_loss(f_h, g_h).item()
    assert M.total_loss(logits, labels, f_h, f_x, g_h, g_x, 0.3, 0.7).item() == pytest.approx(want, rel=1e-12)


def test_no_picm_variant_has_no_compensation():
    cfg = tiny_config(use_picm=False)
    model = M.PicnetModel(cfg)
    assert "proto.h" not in model.params
    x_h, x_x, labels = tiny_batch(cfg, np.random.default_rng(9))
    out = model.forward(x_h, x_x)
    assert out.f_hat_x is None and out.f_hat_h is None
    terms = model.losses(out, labels)
    assert terms.cyc_x.item() == terms.cyc_h.item() == 0.0
    assert terms.total.item() == terms.ce.item()


def test_state_round_trip_and_mismatch():
    cfg = tiny_config()
    a, b = M.PicnetModel(cfg, seed=1), M.PicnetModel(cfg, seed=2)
    b.load_arrays(a.state_arrays())
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    with pytest.raises(ShapeError):
        b.load_arrays({k: v for k, v in a.state_arrays().items() if k != "proto.h"})
    other = M.PicnetModel(dataclasses.replace(cfg, d_model=16))
    with pytest.raises(ShapeError):
        other.load_arrays(a.state_arrays())


def test_forward_deterministic():
    cfg = tiny_config()
    x_h, x_x, labels = tiny_batch(cfg, np.random.default_rng(10))
    losses = [M.PicnetModel(cfg, seed=3).losses(M.PicnetModel(cfg, seed=3).forward(x_h, x_x), labels).total.item()
              for _ in range(2)]
    assert losses[0] == losses[1]


# -- composite gradient checks ---------------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1])
def test_model_level_gradients(seed):
    rng = np.random.default_rng(100 + seed)
    for name, fn, inputs, tol in model_cases(rng, seed):
        r = check_fn(name, seed, fn, inputs, tol, rng=rng, max_coords=None if name != "end_to_end" else 4)
        assert r.passed, (name, r.rel_err)
    assert CONV_TOL < E2E_TOL
