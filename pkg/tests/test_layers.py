import copy

import numpy as np
import pytest

from attrinet import autodiff as ad
from attrinet import layers as L
from attrinet.autodiff import Graph, OptimizerState, Tensor, adam_step


def small_config(**kw):
    defaults = dict(static_width=5, temporal_width=4, static_hidden=(4, 3),
                    lstm_hidden=(3, 3), head_hidden=(6, 4), dropout_rate=0.2)
    defaults.update(kw)
    return L.ModelConfig(**defaults)


# ---------------------------------------------------------------------------
# dense layer


def test_dense_zero_parameters():
    layer = L.DenseLayer(3, 2)
    layer.weight.data[:] = 0.0
    out = L.dense_forward(layer, np.ones((4, 3)))
    np.testing.assert_array_equal(out.data, np.zeros((4, 2)))


def test_dense_identity():
    layer = L.DenseLayer(3, 3)
    layer.weight.data = np.eye(3)
    x = np.random.default_rng(0).normal(size=(2, 3))
    np.testing.assert_allclose(L.dense_forward(layer, x).data, x)


def test_dense_hand_evaluated_sigmoid():
    layer = L.DenseLayer(2, 1, activation="sigmoid")
    layer.weight.data = np.array([[1.0, 1.0]])
    layer.bias.data = np.array([-1.0])
    out = L.dense_forward(layer, np.array([[1.0, 0.0]]))
    assert out.data[0, 0] == 0.5


def test_dense_width_mismatch():
    with pytest.raises(ad.ShapeMismatchError):
        L.dense_forward(L.DenseLayer(3, 2), np.ones((1, 4)))


def test_dense_rejects_unknown_activation():
    with pytest.raises(ValueError):
        L.DenseLayer(2, 2, activation="softplus")


# ---------------------------------------------------------------------------
# bidirectional LSTM


def _cell_oracle(x_t, h_prev, c_prev, wx, wh, b):
    """Independent single-cell evaluation, gate order [i, f, g, o]."""
    H = h_prev.shape[-1]
    z = x_t @ wx + h_prev @ wh + b
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    i, f = sig(z[..., :H]), sig(z[..., H : 2 * H])
    g = np.tanh(z[..., 2 * H : 3 * H])
    o = sig(z[..., 3 * H :])
    c = f * c_prev + i * g
    return o * np.tanh(c), c


def test_bilstm_zero_parameters_zero_output():
    layer = L.BiLstmLayer(4, 3)
    for p in layer.parameters():
        p.data[:] = 0.0
    out, final = L.bilstm_forward(layer, np.random.default_rng(0).normal(size=(2, 5, 4)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 5, 6)))
    np.testing.assert_array_equal(final.data, np.zeros((2, 6)))


def test_bilstm_single_step_matches_cell_oracle():
    rng = np.random.default_rng(3)
    layer = L.BiLstmLayer(4, 3, rng=rng)
    x = rng.normal(size=(2, 1, 4))
    out, _ = L.bilstm_forward(layer, x)
    h_f, _ = _cell_oracle(x[:, 0], np.zeros((2, 3)), np.zeros((2, 3)),
                          *(p.data for p in layer.fwd))
    h_b, _ = _cell_oracle(x[:, 0], np.zeros((2, 3)), np.zeros((2, 3)),
                          *(p.data for p in layer.bwd))
    np.testing.assert_allclose(out.data[:, 0, :3], h_f, atol=1e-12)
    np.testing.assert_allclose(out.data[:, 0, 3:], h_b, atol=1e-12)


def test_bilstm_equals_sequential_cell_evaluations():
    rng = np.random.default_rng(4)
    layer = L.BiLstmLayer(4, 3, rng=rng)
    T = 6
    x = rng.normal(size=(2, T, 4))
    out, final = L.bilstm_forward(layer, x)
    for params, column, order in ((layer.fwd, slice(0, 3), range(T)),
                                  (layer.bwd, slice(3, 6), reversed(range(T)))):
        h = np.zeros((2, 3))
        c = np.zeros((2, 3))
        for t in order:
            h, c = _cell_oracle(x[:, t], h, c, *(p.data for p in params))
            np.testing.assert_allclose(out.data[:, t, column], h, atol=1e-12)
    np.testing.assert_allclose(final.data,
                               np.concatenate([out.data[:, -1, :3], out.data[:, 0, 3:]], axis=1),
                               atol=1e-15)


def test_bilstm_reversed_input_swaps_directions():
    rng = np.random.default_rng(5)
    layer = L.BiLstmLayer(4, 3, rng=rng)
    # share parameters across directions so the symmetry is exact
    for pf, pb in zip(layer.fwd, layer.bwd):
        pb.data = pf.data.copy()
    x = rng.normal(size=(2, 5, 4))
    out_fwd, _ = L.bilstm_forward(layer, x)
    out_rev, _ = L.bilstm_forward(layer, x[:, ::-1])
    np.testing.assert_allclose(out_rev.data[:, ::-1, :3], out_fwd.data[:, :, 3:], atol=1e-12)


def test_bilstm_rejects_empty_sequence():
    layer = L.BiLstmLayer(4, 3)
    with pytest.raises(ValueError, match="empty"):
        L.bilstm_forward(layer, np.zeros((2, 0, 4)))


def test_bilstm_width_mismatch():
    layer = L.BiLstmLayer(4, 3)
    with pytest.raises(ad.ShapeMismatchError):
        L.bilstm_forward(layer, np.zeros((2, 5, 7)))


# ---------------------------------------------------------------------------
# regularization


def test_regularization_inference_uses_running_stats():
    bn = L.BatchNormState(3, momentum=0.9, eps=1e-5)
    bn.running_mean[:] = [1.0, 2.0, 3.0]
    bn.running_var[:] = [4.0, 4.0, 4.0]
    x = np.array([[3.0, 4.0, 5.0]])
    out = L.regularization_forward(x, 0.0, bn, "inference")
    np.testing.assert_allclose(out.data, (x - bn.running_mean) / np.sqrt(4.0 + 1e-5))


def test_regularization_inference_deterministic():
    bn = L.BatchNormState(4)
    x = np.random.default_rng(0).normal(size=(5, 4))
    rng = np.random.default_rng(9)
    a = L.regularization_forward(x, 0.5, bn, "inference", rng)
    b = L.regularization_forward(x, 0.5, bn, "inference", rng)
    np.testing.assert_array_equal(a.data, b.data)


def test_regularization_rejects_bad_mode_and_rate():
    bn = L.BatchNormState(2)
    with pytest.raises(ValueError):
        L.regularization_forward(np.zeros((1, 2)), 0.0, bn, "predict")
    with pytest.raises(ValueError):
        L.regularization_forward(np.zeros((1, 2)), 1.0, bn, "train")


def test_dropout_zeroed_fraction_within_three_sigma():
    x = Tensor(np.ones((100, 100)))
    out = ad.dropout(x, 0.5, np.random.default_rng(42), train=True)
    zeroed = float((out.data == 0).mean())
    sigma = np.sqrt(0.25 / 10_000)
    assert abs(zeroed - 0.5) <= 3 * sigma


def test_batchnorm_train_normalizes_batch():
    bn = L.BatchNormState(2, momentum=0.5)
    x = np.random.default_rng(1).normal(loc=5.0, scale=3.0, size=(200, 2))
    out = bn.forward(Tensor(x), train=True)
    assert np.all(np.abs(out.data.mean(axis=0)) < 1e-10)
    assert np.all(np.abs(out.data.std(axis=0) - 1.0) < 1e-2)
    assert np.all(bn.running_var >= 0)


# ---------------------------------------------------------------------------
# multi-task model


def test_same_seed_bit_identical_models():
    a = L.build_multitask_model(small_config(), seed=9)
    b = L.build_multitask_model(small_config(), seed=9)
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)


def test_heads_have_independent_parameters():
    m = L.build_multitask_model(small_config(), seed=0)
    comp = m.components()
    att = {id(p) for p in comp["attrition_head"]}
    out = {id(p) for p in comp["outcome_head"]}
    assert not att & out
    assert any(not np.array_equal(pa.data, pb.data)
               for pa, pb in zip(comp["attrition_head"], comp["outcome_head"]))


def test_outputs_inside_unit_interval():
    m = L.build_multitask_model(small_config(), seed=1)
    rng = np.random.default_rng(2)
    p_att, p_out = m.forward(rng.normal(size=(6, 5)), rng.normal(size=(6, 4, 4)))
    for p in (p_att.data, p_out.data):
        assert np.all((p > 0) & (p < 1)) and np.all(np.isfinite(p))


def test_inference_repeatable():
    m = L.build_multitask_model(small_config(), seed=1)
    rng = np.random.default_rng(3)
    s, t = rng.normal(size=(4, 5)), rng.normal(size=(4, 3, 4))
    first = m.forward(s, t, "inference")
    second = m.forward(s, t, "inference")
    np.testing.assert_array_equal(first[0].data, second[0].data)
    np.testing.assert_array_equal(first[1].data, second[1].data)


def test_zeroed_temporal_encoder_ignores_temporal_input():
    m = L.build_multitask_model(small_config(dropout_rate=0.0), seed=1)
    for layer in m.lstm_layers:
        for p in layer.parameters():
            p.data[:] = 0.0
    rng = np.random.default_rng(4)
    s = rng.normal(size=(3, 5))
    a1 = m.forward(s, rng.normal(size=(3, 4, 4)), "inference")
    a2 = m.forward(s, rng.normal(size=(3, 4, 4)), "inference")
    np.testing.assert_array_equal(a1[0].data, a2[0].data)
    np.testing.assert_array_equal(a1[1].data, a2[1].data)


def test_head_input_width_invariant():
    cfg = small_config(static_hidden=(7, 5), lstm_hidden=(4, 6))
    assert cfg.head_in_width() == 5 + 2 * 6
    m = L.build_multitask_model(cfg, seed=0)
    assert m.attrition_layers[0].in_width == cfg.head_in_width()


def test_model_width_mismatch_errors():
    m = L.build_multitask_model(small_config(), seed=0)
    with pytest.raises(ad.ShapeMismatchError):
        m.forward(np.zeros((2, 9)), np.zeros((2, 3, 4)))
    with pytest.raises(ad.ShapeMismatchError):
        m.forward(np.zeros((2, 5)), np.zeros((2, 3, 9)))


def _train_steps(model, steps, seed=0):
    rng = np.random.default_rng(seed)
    params = model.parameters()
    opt = OptimizerState()
    for _ in range(steps):
        s = rng.normal(size=(8, 5))
        t = rng.normal(size=(8, 3, 4))
        y = rng.integers(0, 2, 8).astype(float)
        with Graph() as g:
            p_att, p_out = model.forward(s, t, "train")
            loss = ad.add(ad.bce_loss(p_att, y), ad.bce_loss(p_out, 1.0 - y))
        g.backward(loss)
        adam_step(params, opt)


def test_freeze_keeps_shared_components_bit_identical():
    m = L.build_multitask_model(small_config(), seed=5)
    L.freeze_shared(m)
    before = L.component_checksum(m)
    heads_before = L.component_checksum(m, ("attrition_head", "outcome_head"))
    _train_steps(m, 100)
    assert L.component_checksum(m) == before
    assert L.component_checksum(m, ("attrition_head", "outcome_head")) != heads_before


def test_unfrozen_shared_components_change():
    m = L.build_multitask_model(small_config(), seed=5)
    before = L.component_checksum(m)
    _train_steps(m, 100)
    assert L.component_checksum(m) != before


def test_frozen_parameters_receive_no_gradient_buffers():
    m = L.build_multitask_model(small_config(), seed=5)
    L.freeze_shared(m)
    rng = np.random.default_rng(0)
    with Graph() as g:
        p_att, _ = m.forward(rng.normal(size=(4, 5)), rng.normal(size=(4, 3, 4)), "train")
        loss = ad.bce_loss(p_att, np.ones(4))
    g.backward(loss)
    for p in m.components()["static_encoder"] + m.components()["temporal_encoder"]:
        assert p.grad is None


# ---------------------------------------------------------------------------
# checkpointing


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    m = L.build_multitask_model(small_config(), seed=7)
    _train_steps(m, 5)  # move away from init, populate running stats
    path = tmp_path / "model.npz"
    L.save_model(m, path)
    loaded = L.load_model(path)
    for pa, pb in zip(m.parameters(), loaded.parameters()):
        assert pa.name == pb.name
        np.testing.assert_array_equal(pa.data, pb.data)
    for (na, ba), (nb, bb) in zip(m.buffers(), loaded.buffers()):
        assert na == nb
        np.testing.assert_array_equal(ba, bb)
    rng = np.random.default_rng(1)
    s, t = rng.normal(size=(3, 5)), rng.normal(size=(3, 4, 4))
    np.testing.assert_array_equal(m.forward(s, t)[0].data, loaded.forward(s, t)[0].data)


def test_checkpoint_preserves_frozen_flag(tmp_path):
    m = L.build_multitask_model(small_config(), seed=7)
    L.freeze_shared(m)
    L.save_model(m, tmp_path / "m.npz")
    loaded = L.load_model(tmp_path / "m.npz")
    assert loaded.frozen_shared
    assert not loaded.static_layers[0].weight.requires_grad


def test_checkpoint_rejects_unknown_version(tmp_path):
    m = L.build_multitask_model(small_config(), seed=7)
    path = tmp_path / "m.npz"
    L.save_model(m, path)
    import json
    data = dict(np.load(path))
    header = json.loads(bytes(data["__header__"].tobytes()).decode())
    header["version"] = "attrinet-ckpt-99"
    data["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **data)
    with pytest.raises(ValueError, match="version"):
        L.load_model(path)
