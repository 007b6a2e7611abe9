"""Unit tests for the network layers, parameter init and checkpoints."""

import numpy as np
import pytest

from dsn import autodiff as ad
from dsn.checks import toy_batch, toy_config
from dsn.errors import ConfigError, FormatError, ShapeError
from dsn.model import (ModelConfig, fuse_ffn, glu_gate, grn, hce_forward,
                       init_params, load_checkpoint, local_temporal,
                       model_forward, save_checkpoint, target_attention,
                       vl_adapt)


@pytest.fixture
def cfg():
    return toy_config()


@pytest.fixture
def params(cfg):
    return init_params(cfg, seed=0)


def _close_gates(params):
    """Force every gate bias to -20 so each sigmoid saturates at ~0."""
    for name, p in params.items():
        if name.endswith("gate.b2") or (".gate" in name and name.endswith(".b2")):
            p.data[:] = -20.0


# --- glu gate --------------------------------------------------------------

def test_glu_gate_half_open_at_zero_preactivation():
    rng = np.random.default_rng(0)
    d = 5
    x = ad.constant(rng.normal(size=(3, d)))
    w1 = ad.constant(rng.normal(size=(d, d)))
    b1 = ad.constant(rng.normal(size=d))
    zeros = ad.constant(np.zeros((d, d)))
    out = glu_gate(x, None, w1, b1, zeros, ad.constant(np.zeros(d)))
    np.testing.assert_allclose(out.data, 0.5 * (x.data @ w1.data + b1.data))


def test_glu_gate_saturated_open():
    rng = np.random.default_rng(1)
    d = 5
    x = ad.constant(rng.normal(size=(3, d)))
    w1 = ad.constant(rng.normal(size=(d, d)))
    b1 = ad.constant(rng.normal(size=d))
    out = glu_gate(x, None, w1, b1, ad.constant(np.zeros((d, d))),
                   ad.constant(np.full(d, 20.0)))
    np.testing.assert_allclose(out.data, x.data @ w1.data + b1.data, atol=1e-8)


def test_glu_gate_saturated_closed():
    rng = np.random.default_rng(2)
    d = 5
    x = ad.constant(rng.normal(size=(3, d)))
    out = glu_gate(x, None, ad.constant(rng.normal(size=(d, d))),
                   ad.constant(rng.normal(size=d)),
                   ad.constant(np.zeros((d, d))), ad.constant(np.full(d, -20.0)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-8)


def test_glu_gate_y_and_w3_must_pair():
    x = ad.constant(np.zeros((2, 3)))
    w = ad.constant(np.zeros((3, 3)))
    b = ad.constant(np.zeros(3))
    with pytest.raises(ShapeError):
        glu_gate(x, x, w, b, w, b)  # y given without w3


# --- adapter ---------------------------------------------------------------

def _adapter_weights(rng, d_in, d_out):
    return (ad.constant(rng.normal(size=(3, d_in, d_out))),
            ad.constant(rng.normal(size=d_out)),
            ad.constant(rng.normal(size=(1, d_in, d_out))),
            ad.constant(rng.normal(size=d_out)))


def test_vl_adapt_ratio_one_is_pure_reprojection():
    rng = np.random.default_rng(3)
    f = ad.constant(rng.normal(size=(6, 4)))
    k3, b3, k1, b1 = _adapter_weights(rng, 4, 5)
    out = vl_adapt(f, 1.0, k3, b3, k1, b1)
    np.testing.assert_allclose(out.data, f.data @ k1.data[0] + b1.data)


def test_vl_adapt_ratio_zero_is_fully_adapted():
    rng = np.random.default_rng(4)
    f = ad.constant(rng.normal(size=(6, 4)))
    k3, b3, k1, b1 = _adapter_weights(rng, 4, 5)
    out = vl_adapt(f, 0.0, k3, b3, k1, b1)
    conv3 = ad.relu(ad.conv1d_same(f, k3, b3)).data
    np.testing.assert_allclose(out.data, conv3)


def test_vl_adapt_scalar_hand_blend():
    # 1-channel, length-1 sequence: conv3 sees only the centre tap
    f = ad.constant(np.array([[2.0]]))
    k3 = ad.constant(np.array([[[1.0]], [[3.0]], [[1.0]]]))  # centre weight 3
    k1 = ad.constant(np.array([[[10.0]]]))
    zero = ad.constant(np.zeros(1))
    out = vl_adapt(f, 0.5, k3, zero, k1, zero)
    # 0.5*relu(2*3) + 0.5*(2*10) = 3 + 10
    np.testing.assert_allclose(out.data, [[13.0]])


def test_vl_adapt_ratio_out_of_range():
    f = ad.constant(np.zeros((2, 2)))
    with pytest.raises(ConfigError):
        vl_adapt(f, 1.5, *_adapter_weights(np.random.default_rng(0), 2, 2))


# --- category encoders -----------------------------------------------------

def test_hce_is_a_function_of_the_id_path(cfg, params):
    ids_a = np.array([[0, 1, 2]])
    ids_b = np.array([[0, 1, 2]])
    ids_c = np.array([[0, 1, 3]])  # same levels 1-2, different leaf
    out_a = hce_forward(ids_a, params, cfg).data
    out_b = hce_forward(ids_b, params, cfg).data
    out_c = hce_forward(ids_c, params, cfg).data
    np.testing.assert_array_equal(out_a, out_b)
    assert np.abs(out_a - out_c).max() > 1e-8


def test_hce_closed_gate_collapses_to_leaf_projection(cfg, params):
    _close_gates(params)
    ids = np.array([[1, 2, 3], [0, 0, 0]])
    out = hce_forward(ids, params, cfg).data
    f3 = params["cat.table3"].data[ids[:, 2]]
    expected = np.concatenate([f3, np.zeros_like(f3)], axis=-1) @ params["hce.fuse3.w"].data
    np.testing.assert_allclose(out, expected, atol=1e-8)


def test_hce_two_level_toy_hand_computation():
    cfg = toy_config(d_hidden=2, heads=1, level_cardinalities=(2, 2, 2))
    params = init_params(cfg, seed=3)
    ids = np.array([[1, 0, 1]])
    out = hce_forward(ids, params, cfg).data[0]

    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    p = {k: t.data for k, t in params.items()}
    prev = p["hce.init"]
    for k in (1, 2, 3):
        f = p[f"cat.table{k}"][ids[0, k - 1]]
        lin = prev @ p[f"hce.gate{k}.w1"] + p[f"hce.gate{k}.b1"]
        gate = sig(prev @ p[f"hce.gate{k}.w2"] + f @ p[f"hce.gate{k}.w3"]
                   + p[f"hce.gate{k}.b2"])
        prev = np.concatenate([f, lin * gate]) @ p[f"hce.fuse{k}.w"]
    np.testing.assert_allclose(out, prev, rtol=1e-12)


# --- grn -------------------------------------------------------------------

def test_grn_closed_gate_is_layer_norm(cfg, params):
    _close_gates(params)
    rng = np.random.default_rng(5)
    x = ad.constant(rng.normal(size=(4, cfg.d_hidden)))
    out = grn(x, params).data
    expected = ad.layer_norm(x, params["grn.ln.gain"], params["grn.ln.bias"]).data
    np.testing.assert_allclose(out, expected, atol=1e-8)


def test_grn_closed_gate_constant_input_is_zero(cfg, params):
    _close_gates(params)
    x = ad.constant(np.full((2, cfg.d_hidden), 4.2))
    # the -20 gate leaks ~2e-9 which the norm's eps guard scales by ~316
    np.testing.assert_allclose(grn(x, params).data, 0.0, atol=1e-5)


def test_grn_two_dim_hand_computation():
    cfg = toy_config(d_hidden=2, heads=1)
    params = init_params(cfg, seed=4)
    x = np.array([[0.7, -1.2]])
    out = grn(ad.constant(x), params).data[0]

    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    elu = lambda v: np.where(v > 0, v, np.expm1(v))
    p = {k: t.data for k, t in params.items()}
    eta2 = elu(x[0] @ p["grn.w2"] + p["grn.b2"])
    eta1 = eta2 @ p["grn.w1"] + p["grn.b1"]
    gated = (eta1 @ p["grn.gate.w1"] + p["grn.gate.b1"]) * sig(
        eta1 @ p["grn.gate.w2"] + p["grn.gate.b2"])
    pre = x[0] + gated
    norm = (pre - pre.mean()) / np.sqrt(pre.var() + 1e-5)
    expected = norm * p["grn.ln.gain"] + p["grn.ln.bias"]
    np.testing.assert_allclose(out, expected, rtol=1e-10)


# --- temporal fusion -------------------------------------------------------

def test_local_temporal_without_lstm_is_linear_downscale(params):
    cfg = toy_config(use_local_lstm=False)
    p = init_params(cfg, seed=0)
    rng = np.random.default_rng(6)
    f = rng.normal(size=(2, cfg.window_len, cfg.n_modalities * cfg.d_hidden))
    mask = np.ones((2, cfg.window_len), dtype=bool)
    out = local_temporal(ad.constant(f), mask, p, cfg).data
    np.testing.assert_allclose(out, f @ p["temporal.w"].data)


def test_local_temporal_zero_lstm_closed_gate_is_residual_path(cfg, params):
    _close_gates(params)
    params["lstm.wx"].data[:] = 0.0
    params["lstm.wh"].data[:] = 0.0
    params["lstm.b"].data[:] = 0.0
    rng = np.random.default_rng(7)
    f = rng.normal(size=(2, cfg.window_len, cfg.n_modalities * cfg.d_hidden))
    mask = np.ones((2, cfg.window_len), dtype=bool)
    out = local_temporal(ad.constant(f), mask, params, cfg).data
    down = ad.constant(f @ params["temporal.w"].data)
    expected = grn(ad.layer_norm(down, params["temporal.ln.gain"],
                                 params["temporal.ln.bias"]), params).data
    np.testing.assert_allclose(out, expected, atol=1e-8)


# --- attention -------------------------------------------------------------

def test_attention_single_neighbor_passes_its_value(cfg, params):
    rng = np.random.default_rng(8)
    B, l, d = 1, cfg.window_len, cfg.d_hidden
    phi = rng.normal(size=(B, l, d))
    mask = np.zeros((B, l), dtype=bool)
    mask[0, 1] = True   # exactly one real neighbor
    mask[0, -1] = True  # the target itself
    h, attn, has = target_attention(ad.constant(phi), mask, params, cfg)
    assert has[0]
    np.testing.assert_allclose(attn[0, :, 1], 1.0)
    np.testing.assert_allclose(h.data[0], phi[0, 1] @ params["attn.wv"].data,
                               rtol=1e-10)


def test_attention_identical_neighbors_give_their_value(cfg, params):
    rng = np.random.default_rng(9)
    B, l, d = 1, cfg.window_len, cfg.d_hidden
    row = rng.normal(size=d)
    phi = np.tile(row, (B, l, 1))
    phi[0, -1] = rng.normal(size=d)  # distinct target
    mask = np.ones((B, l), dtype=bool)
    h, attn, _ = target_attention(ad.constant(phi), mask, params, cfg)
    np.testing.assert_allclose(h.data[0], row @ params["attn.wv"].data, rtol=1e-10)


def test_attention_weights_match_brute_force(cfg, params):
    rng = np.random.default_rng(10)
    B, l, d, nh = 2, 4, cfg.d_hidden, cfg.heads
    dh = d // nh
    cfg = toy_config(window_len=l)
    phi = rng.normal(size=(B, l, d))
    mask = np.ones((B, l), dtype=bool)
    mask[1, 0] = False
    h, attn, _ = target_attention(ad.constant(phi), mask, params, cfg)
    for b in range(B):
        q = phi[b, -1] @ params["attn.wq"].data
        for head in range(nh):
            sl = slice(head * dh, (head + 1) * dh)
            scores = np.array([
                q[sl] @ (phi[b, j] @ params["attn.wk"].data)[sl] / np.sqrt(dh)
                for j in range(l - 1)])
            scores[~mask[b, :l - 1]] = -np.inf
            e = np.exp(scores - scores[mask[b, :l - 1]].max())
            e[~mask[b, :l - 1]] = 0.0
            w = e / e.sum()
            assert abs(attn[b, head].sum() - 1.0) < 1e-12
            np.testing.assert_allclose(attn[b, head], w, rtol=1e-10)


def test_attention_no_neighbors_falls_back_to_zero(cfg, params):
    phi = np.random.default_rng(11).normal(size=(1, cfg.window_len, cfg.d_hidden))
    mask = np.zeros((1, cfg.window_len), dtype=bool)
    mask[0, -1] = True
    h, attn, has = target_attention(ad.constant(phi), mask, params, cfg)
    assert not has[0]
    np.testing.assert_array_equal(h.data, 0.0)
    np.testing.assert_array_equal(attn, 0.0)


def test_attention_neighbor_permutation_invariance(cfg, params):
    # no positional signal inside the attention stage: permuting the
    # neighbor positions permutes the weights but leaves h unchanged
    rng = np.random.default_rng(12)
    phi = rng.normal(size=(1, cfg.window_len, cfg.d_hidden))
    mask = np.ones((1, cfg.window_len), dtype=bool)
    h1, _, _ = target_attention(ad.constant(phi), mask, params, cfg)
    perm = rng.permutation(cfg.window_len - 1)
    phi2 = phi.copy()
    phi2[0, :-1] = phi[0, perm]
    h2, _, _ = target_attention(ad.constant(phi2), mask, params, cfg)
    np.testing.assert_allclose(h1.data, h2.data, rtol=1e-10)


# --- ffn -------------------------------------------------------------------

def test_fuse_ffn_all_zero_weights_gives_final_bias(cfg, params):
    for n in ("ffn.w1", "ffn.w2"):
        params[n].data[:] = 0.0
    params["ffn.b1"].data[:] = -1.0  # relu clips the b1 path
    params["ffn.b2"].data[:] = 0.75
    rng = np.random.default_rng(13)
    h = ad.constant(rng.normal(size=(3, cfg.d_hidden)))
    out = fuse_ffn(h, h, params).data
    np.testing.assert_allclose(out, 0.75)


# --- full forward ----------------------------------------------------------

def test_model_forward_eval_is_deterministic(cfg, params):
    batch = toy_batch(cfg)
    a = model_forward(batch, params, cfg, mode="eval").predictions.data
    b = model_forward(batch, params, cfg, mode="eval").predictions.data
    np.testing.assert_array_equal(a, b)


def test_model_forward_identical_windows_identical_predictions(cfg, params):
    batch = toy_batch(cfg)
    batch.image[1] = batch.image[0]
    batch.text[1] = batch.text[0]
    batch.category_ids[1] = batch.category_ids[0]
    batch.pad_mask[1] = batch.pad_mask[0]
    batch.uid_idx[1] = batch.uid_idx[0]
    batch.user_static[1] = batch.user_static[0]
    out = model_forward(batch, params, cfg, mode="eval").predictions.data
    assert out[0] == out[1]


def test_model_forward_train_requires_rng(cfg, params):
    cfg = toy_config(dropout=0.5)
    batch = toy_batch(cfg)
    with pytest.raises(ConfigError):
        model_forward(batch, init_params(cfg, seed=0), cfg, mode="train")


def test_model_forward_bad_mode(cfg, params):
    with pytest.raises(ConfigError):
        model_forward(toy_batch(cfg), params, cfg, mode="test")


def test_every_parameter_receives_a_gradient(cfg, params):
    batch = toy_batch(cfg)
    for p in params.values():
        p.zero_grad()
    with ad.GradTape() as tape:
        out = model_forward(batch, params, cfg, mode="eval")
        tape.backward(ad.reduce_sum(ad.mul(out.predictions, out.predictions)))
    for name, p in params.items():
        assert p.grad is not None, name
        assert np.isfinite(p.grad).all(), name
        if name != "user.uid_table":  # only looked-up uid rows get gradient
            assert np.abs(p.grad).max() > 0.0, name


# --- config / init ---------------------------------------------------------

def test_config_validation_errors():
    with pytest.raises(ConfigError):
        ModelConfig(d_origin=4, d_hidden=10, heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(d_origin=4, alpha=1.5)
    with pytest.raises(ConfigError):
        ModelConfig(d_origin=4, window_len=0)
    with pytest.raises(ConfigError):
        ModelConfig(d_origin=4, category_encoder="onehot")


def test_disabled_components_have_no_parameters():
    cfg = toy_config(use_image=False, use_local_lstm=False,
                     use_long_attention=False)
    params = init_params(cfg, seed=0)
    assert not any(n.startswith(("adapter_v.", "lstm.", "attn.")) for n in params)
    assert "temporal.w" in params


def test_feature_free_config_still_predicts():
    cfg = toy_config(use_image=False, use_text=False, use_category=False)
    params = init_params(cfg, seed=0)
    batch = toy_batch(toy_config())
    out = model_forward(batch, params, cfg, mode="eval")
    assert out.predictions.data.shape == (2,)
    assert np.isfinite(out.predictions.data).all()


def test_digest_tracks_configuration():
    a = toy_config()
    b = toy_config(alpha=0.3)
    assert a.digest() == toy_config().digest()
    assert a.digest() != b.digest()


# --- checkpoints -----------------------------------------------------------

def test_checkpoint_round_trip_is_byte_stable(tmp_path, cfg, params):
    p1 = tmp_path / "a.dsnp"
    p2 = tmp_path / "b.dsnp"
    save_checkpoint(p1, params, cfg)
    loaded = load_checkpoint(p1, cfg)
    save_checkpoint(p2, loaded, cfg)
    assert p1.read_bytes() == p2.read_bytes()
    for name, t in params.items():
        np.testing.assert_array_equal(loaded[name].data, t.data)


def test_checkpoint_digest_mismatch(tmp_path, cfg, params):
    path = tmp_path / "a.dsnp"
    save_checkpoint(path, params, cfg)
    with pytest.raises(FormatError):
        load_checkpoint(path, toy_config(alpha=0.9))


def test_checkpoint_truncation_detected(tmp_path, cfg, params):
    path = tmp_path / "a.dsnp"
    save_checkpoint(path, params, cfg)
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) - 16])
    with pytest.raises(FormatError):
        load_checkpoint(path, cfg)


def test_checkpoint_bad_magic(tmp_path, cfg, params):
    path = tmp_path / "a.dsnp"
    save_checkpoint(path, params, cfg)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_checkpoint(path)
