from __future__ import annotations

import numpy as np
import pytest

from fedstg import autodiff as ad
from fedstg import codebook as cb
from fedstg import model as mdl
from fedstg.autodiff import ShapeError, Tape
from fedstg.data import encode_time

SLOTS = 12


def _setup(seed=0, V=4, gamma=3, beta=3, B=2, D=8, code_dim=6, prototypes=5):
    rng = np.random.default_rng(seed)
    cfg = mdl.ModelConfig(hidden=D, se_dim=4, slots_per_day=SLOTS, code_dim=code_dim)
    params = mdl.init_params(cfg, seed)
    stamps = np.arange(gamma + beta)[None] + 5 * np.arange(B)[:, None]
    batch = mdl.Batch(rng.standard_normal((B, gamma, V, 1)), rng.standard_normal((B, beta, V, 1)),
                      encode_time(stamps, SLOTS), rng.standard_normal((V, 4)))
    delta = cb.init_codebook(prototypes, code_dim, seed).delta
    return cfg, params, batch, delta


def _leaves(tape, params):
    return {k: tape.leaf(v, name=k) for k, v in params.items()}


def test_ste_shapes_and_bias_pattern():
    cfg, params, batch, _ = _setup()
    tape = Tape()
    P = _leaves(tape, params)
    his, pred = mdl.build_ste(P, tape.const(batch.time_features), tape.const(batch.se), 3)
    assert his.shape == (2, 3, 4, 8) and pred.shape == (2, 3, 4, 8)
    tape = Tape()
    P = {k: tape.leaf(v if "w" in k.split(".")[-1] else np.random.default_rng(1).standard_normal(v.shape))
         for k, v in params.items()}
    his, _ = mdl.build_ste(P, tape.const(np.zeros_like(batch.time_features)), tape.const(np.zeros((4, 4))), 3)
    flat = his.value.reshape(-1, 8)
    np.testing.assert_allclose(flat, np.broadcast_to(flat[0], flat.shape), atol=1e-15)


def test_ste_rejects_se_width_mismatch():
    cfg, params, batch, _ = _setup()
    tape = Tape()
    with pytest.raises(ShapeError):
        mdl.build_ste(_leaves(tape, params), tape.const(batch.time_features), tape.const(np.zeros((4, 3))), 3)


def _attention_input(seed, V=5, S=4, D=8):
    cfg = mdl.ModelConfig(hidden=D, slots_per_day=SLOTS)
    return mdl.init_params(cfg, seed), np.random.default_rng(seed).standard_normal((2, S, V, D))


def test_single_node_attention_is_identity_weight():
    params, h = _attention_input(0, V=1)
    tape = Tape()
    _, w = mdl.spatial_attention(tape.const(h), _leaves(tape, params))
    np.testing.assert_array_equal(w.value, 1.0)
    params, h = _attention_input(0, S=1)
    _, w = mdl.temporal_attention(tape.const(h), _leaves(tape, params))
    np.testing.assert_array_equal(w.value, 1.0)


@pytest.mark.parametrize("seed", range(20))
def test_spatial_attention_permutation_equivariant(seed):
    params, h = _attention_input(seed)
    perm = np.random.default_rng(seed + 100).permutation(h.shape[2])
    tape = Tape()
    P = _leaves(tape, params)
    out, w = mdl.spatial_attention(tape.const(h), P)
    out_p, _ = mdl.spatial_attention(tape.const(h[:, :, perm]), P)
    back = np.empty_like(out_p.value)
    back[:, :, perm] = out_p.value
    np.testing.assert_allclose(back, out.value, atol=1e-10)
    np.testing.assert_allclose(w.value.sum(-1), 1.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_temporal_attention_is_node_local(seed):
    params, h = _attention_input(seed)
    tape = Tape()
    P = _leaves(tape, params)
    out, w = mdl.temporal_attention(tape.const(h), P)
    h2 = h.copy()
    h2[:, :, 1] += np.random.default_rng(seed).standard_normal(h2[:, :, 1].shape)
    out2, _ = mdl.temporal_attention(tape.const(h2), P)
    others = [v for v in range(h.shape[2]) if v != 1]
    np.testing.assert_allclose(out2.value[:, :, others], out.value[:, :, others], atol=1e-12)
    np.testing.assert_allclose(w.value.sum(-1), 1.0, atol=1e-12)


def test_separation_matches_composed_oracle():
    rng = np.random.default_rng(2)
    f, ref, w, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3)), rng.standard_normal((3, 3)), rng.standard_normal(3)
    tape = Tape()
    sep = mdl.conditional_separate(tape.leaf(f), tape.const(ref), tape.leaf(w), tape.leaf(b))
    m_c = 1 / (1 + np.exp(-(ref @ w + b)))
    m_o = 1 - m_c

    def ln(m):
        return (m - m.mean(-1, keepdims=True)) / np.sqrt(m.var(-1, keepdims=True) + 1e-5)

    np.testing.assert_allclose(sep.shared.value, np.maximum((1 + ln(m_c)) * f, 0), atol=1e-12)
    np.testing.assert_allclose(sep.specific.value, np.maximum((1 + ln(m_o)) * f, 0), atol=1e-12)
    assert np.all(sep.mask_shared.value + sep.mask_specific.value == 1.0)


def test_constant_mask_gives_relu_identity():
    rng = np.random.default_rng(3)
    f = rng.standard_normal((2, 4))
    tape = Tape()
    # zero weights make the mask constant along the feature axis
    sep = mdl.conditional_separate(tape.leaf(f), tape.const(rng.standard_normal((2, 4))), tape.leaf(np.zeros((4, 4))),
                                   tape.leaf(np.full(4, 0.3)))
    np.testing.assert_array_equal(sep.shared.value, np.maximum(f, 0))


def test_separation_bypass_and_shape_check():
    tape = Tape()
    f = tape.leaf(np.array([[-1.0, 2.0]]))
    sep = mdl.conditional_separate(f, None, None, None, bypass=True)
    np.testing.assert_array_equal(sep.mask_shared.value, 1.0)
    np.testing.assert_array_equal(sep.specific.value, 0.0)
    np.testing.assert_array_equal(sep.shared.value, [[0.0, 2.0]])
    with pytest.raises(ShapeError):
        mdl.conditional_separate(f, tape.const(np.ones(3)), tape.leaf(np.ones((2, 2))), tape.leaf(np.ones(2)))


def test_irm_penalty_examples():
    tape = Tape()
    assert float(mdl.irm_penalty(tape.leaf(np.array([2.0])), tape.const(np.array([1.0]))).value) == 16.0
    y = np.array([0.3, -1.0])
    assert float(mdl.irm_penalty(tape.leaf(y), tape.const(y)).value) == 0.0


def test_irm_penalty_matches_finite_difference_in_w():
    rng = np.random.default_rng(4)
    pred, y = rng.standard_normal((2, 3, 5))
    tape = Tape()
    pen = float(mdl.irm_penalty(tape.leaf(pred), tape.const(y)).value)
    h = 1e-6
    risk = lambda w: np.mean((w * pred - y) ** 2)  # noqa: E731
    fd = (risk(1 + h) - risk(1 - h)) / (2 * h)
    assert abs(pen - fd**2) < 1e-6


def test_local_loss_weights():
    tape = Tape()
    p = tape.leaf(np.array([1.0, 2.0]))
    y = tape.const(np.array([1.0, 2.0]))
    zero = tape.const(np.array(0.0))
    assert mdl.local_loss(p, y, zero, zero).l_local == 0.0
    q = tape.leaf(np.array([2.0, 2.0]))
    lb = mdl.local_loss(q, y, tape.const(np.array(3.0)), tape.const(np.array(5.0)), 0.0, 0.0)
    assert lb.l_local == lb.l_mse == 0.5
    lb = mdl.local_loss(q, y, tape.const(np.array(3.0)), tape.const(np.array(5.0)))
    assert lb.l_local == 0.5 + 3.0 + 5.0 and lb.lambda_com == 1.0 and lb.lambda_irm == 1.0
    with pytest.raises(ValueError):
        mdl.local_loss(q, y, None, None, -1.0)


def test_predict_shape_and_determinism():
    cfg, params, batch, delta = _setup()
    outs = []
    for _ in range(2):
        tape = Tape()
        res = mdl.predict(tape, _leaves(tape, params), batch, cfg, tape.leaf(delta))
        outs.append(res.pred.value)
        assert res.pred.shape == (2, 3, 4, 1)
        assert set(res.queries) == set(mdl.BRANCHES)
        for sep in list(res.encoder.values()) + list(res.decoder.values()):
            assert np.all(sep.mask_shared.value + sep.mask_specific.value == 1.0)
        for w in res.attention.values():
            np.testing.assert_allclose(w.value.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(outs[0], outs[1])


def test_predict_rejects_node_mismatch():
    cfg, params, batch, _ = _setup()
    bad = mdl.Batch(batch.x, batch.y, batch.time_features, np.zeros((5, 4)))
    tape = Tape()
    with pytest.raises(ShapeError):
        mdl.predict(tape, _leaves(tape, params), bad, cfg)


def test_end_to_end_gradients_every_parameter_group():
    cfg, params, batch, delta = _setup()
    tape = Tape()
    P = _leaves(tape, params)
    d = tape.leaf(delta)
    lb, _ = mdl.training_loss(tape, P, batch, cfg, d, None)
    worst = max(ad.grad_check(tape, lb.node, leaf, 1e-5, max_elements=5) for leaf in list(P.values()) + [d])
    assert worst < 1e-4


def test_reference_ema():
    cfg, params, batch, delta = _setup()
    tape = Tape()
    _, out = mdl.training_loss(tape, _leaves(tape, params), batch, cfg, tape.leaf(delta), None)
    ema = mdl.update_reference(None, out)
    first = out.branch_features["enc.spatial"].value.mean(0)
    np.testing.assert_array_equal(ema["enc.spatial"], first)
    ema = mdl.update_reference(ema, out)
    np.testing.assert_allclose(ema["enc.spatial"], first, atol=1e-15)


def test_plain_encoder_decoder_trains():
    # separation and codebook ablated: masks all ones, no contrastive term
    rng = np.random.default_rng(5)
    V, gamma, beta = 4, 3, 3
    t = np.arange(120)
    series = np.sin(2 * np.pi * t / 12)[:, None, None] * (1 + 0.2 * np.arange(V))[None, :, None]
    starts = np.arange(0, 120 - gamma - beta)
    x = np.stack([series[s : s + gamma] for s in starts])
    y = np.stack([series[s + gamma : s + gamma + beta] for s in starts])
    stamps = starts[:, None] + np.arange(gamma + beta)[None]
    cfg = mdl.ModelConfig(hidden=8, se_dim=4, slots_per_day=SLOTS)
    params = mdl.init_params(cfg, 0)
    se = rng.standard_normal((V, 4))
    losses = []
    for epoch in range(50):
        total = 0.0
        for b in range(0, len(starts), 38):
            idx = slice(b, b + 38)
            batch = mdl.Batch(x[idx], y[idx], encode_time(stamps[idx], SLOTS), se)
            tape = Tape()
            P = _leaves(tape, params)
            lb, _ = mdl.training_loss(tape, P, batch, cfg, None, None, 0.0, 0.0, separate=False)
            g = tape.backward(lb.node)
            params = {k: v - 0.05 * g[P[k].id] for k, v in params.items()}
            total += lb.l_mse
        losses.append(total)
    assert losses[-1] < 0.5 * losses[0]


def test_parameter_count_positive_and_names_stable():
    cfg = mdl.ModelConfig()
    names = list(mdl.param_shapes(cfg))
    assert names == list(mdl.init_params(cfg))
    assert mdl.parameter_count(cfg) > 0
