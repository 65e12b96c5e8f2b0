import importlib.util
import math
import re
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from hse import checkpoint, tensor as T
from hse.model import (ConfigError, HSENetwork, ModelConfig, attend_aggregate, fuse_scores, hse_forward,
                       normalize_attention)
from hse.taxonomy import Taxonomy, parse_taxonomy
from hse.tensor import Tensor

ROOT = Path(__file__).resolve().parents[1]
TAX3 = parse_taxonomy("a\ta1\ta1x\na\ta1\ta1y\na\ta2\ta2x\nb\tb1\tb1x\nb\tb1\tb1y\nb\tb2\tb2x\n")


def small_config(tax=TAX3, **kw):
    base = dict(level_sizes=tax.level_sizes, trunk_widths=(4, 6), feature_dim=8,
                semantic_dim=5, attention_hidden=6, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def relu_conv_oracle(x, w, b):
    return np.maximum(oracles.conv2d(x, w, b, 1, w.shape[2] // 2), 0)


@pytest.fixture
def net():
    return HSENetwork(small_config(), TAX3, seed=3)


@pytest.fixture
def images():
    return np.random.default_rng(0).uniform(0, 1, (2, 3, 16, 16))


# -- parameters and config -------------------------------------------------------------

def test_parameter_names_follow_convention(net):
    pattern = re.compile(r"^(trunk\.\d+|branch\d+\.(phi|psi|varphi|attn1|attn2|cls_g|cls_u|cls_c))\.(weight|bias)$")
    assert all(pattern.match(n) for n in net.params)
    assert "branch1.phi.weight" not in net.params  # level 1 is unguided
    assert "branch2.attn1.weight" in net.params


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(level_sizes=(2, 0))
    with pytest.raises(ConfigError):
        ModelConfig(level_sizes=(2,), feature_dim=0)
    with pytest.raises(ConfigError):
        HSENetwork(ModelConfig(level_sizes=(2, 5)), TAX3)
    cfg = small_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.balance == 16.0


def test_seed_determines_parameters():
    a, b = HSENetwork(small_config(), TAX3, seed=1), HSENetwork(small_config(), TAX3, seed=1)
    assert all(a.params[n].data.tobytes() == b.params[n].data.tobytes() for n in a.params)


def test_state_dict_round_trip_and_strictness(net):
    other = HSENetwork(small_config(), TAX3, seed=9)
    other.load_state_dict(net.state_dict())
    assert all(np.array_equal(other.params[n].data, net.params[n].data) for n in net.params)
    state = net.state_dict()
    state.pop("branch1.psi.bias")
    with pytest.raises(ConfigError):
        other.load_state_dict(state)


# -- trunk -----------------------------------------------------------------------------

def test_trunk_zero_image_zero_bias(net):
    out = net.trunk_forward(Tensor(np.zeros((1, 3, 16, 16))))
    assert np.all(out.data == 0)


def test_trunk_is_deterministic(net, images):
    assert net.trunk_forward(Tensor(images)).data.tobytes() == net.trunk_forward(Tensor(images)).data.tobytes()


def test_default_trunk_output_size():
    cfg = ModelConfig(level_sizes=(2, 4))
    assert cfg.trunk_output_size(64) == (4, 4)
    net = HSENetwork(cfg, seed=0)
    assert net.trunk_forward(Tensor(np.zeros((1, 3, 64, 64)))).shape == (1, 64, 4, 4)


def test_trunk_rejects_wrong_channels(net):
    with pytest.raises(ConfigError):
        net.trunk_forward(Tensor(np.zeros((1, 1, 16, 16))))


# -- branch pieces ----------------------------------------------------------------------

def test_phi_identity_configuration():
    cfg = small_config(feature_dim=6, branch_kernel=1)
    net = HSENetwork(cfg, TAX3)
    net.params["branch2.phi.weight"].data = np.eye(6).reshape(6, 6, 1, 1)
    f_I = Tensor(np.random.default_rng(1).uniform(0, 1, (2, 6, 4, 4)))
    assert np.array_equal(net.branch_phi(f_I, 2).data, f_I.data)


def test_phi_zero_input_gives_bias_map(net):
    b = np.linspace(-1, 1, 8)
    net.params["branch2.phi.bias"].data = b
    out = net.branch_phi(Tensor(np.zeros((1, 6, 4, 4))), 2)
    assert np.array_equal(out.data, np.broadcast_to(np.maximum(b, 0)[None, :, None, None], out.shape))


def test_phi_and_psi_match_oracle(net):
    f_I = np.random.default_rng(2).standard_normal((2, 6, 4, 4))
    for which in ("phi", "psi"):
        w, b = net.params[f"branch2.{which}.weight"].data, net.params[f"branch2.{which}.bias"].data
        expect = relu_conv_oracle(f_I, w, b)
        if which == "phi":
            got = net.branch_phi(Tensor(f_I), 2).data
        else:
            got, expect = net.branch_psi_pool(Tensor(f_I), 2).data, expect.mean(axis=(2, 3))
        np.testing.assert_allclose(got, expect, atol=1e-12)


def test_psi_pool_simple_cases(net):
    net.params["branch1.psi.weight"].data[:] = 0
    net.params["branch1.psi.bias"].data = np.full(8, 0.75)
    out = net.branch_psi_pool(Tensor(np.random.default_rng(0).standard_normal((1, 6, 4, 4))), 1)
    assert np.all(out.data == 0.75)
    net.params["branch1.psi.bias"].data = np.zeros(8)
    assert np.all(net.branch_psi_pool(Tensor(np.zeros((1, 6, 4, 4))), 1).data == 0)


def test_semantic_map_cases(net):
    assert np.all(net.semantic_map(Tensor(np.zeros((1, 2))), 2).data == 0)
    s = np.random.default_rng(3).standard_normal((2, 2))
    W, b = net.params["branch2.varphi.weight"].data, net.params["branch2.varphi.bias"].data
    np.testing.assert_allclose(net.semantic_map(Tensor(s), 2).data, oracles.linear(s, W, b), atol=1e-12)
    sq = HSENetwork(small_config(semantic_dim=2), TAX3)
    sq.params["branch2.varphi.weight"].data = np.eye(2)
    assert np.array_equal(sq.semantic_map(Tensor(s), 2).data, s)


def test_attention_scores_cases(net):
    rng = np.random.default_rng(4)
    sem = Tensor(rng.standard_normal((1, 5)))
    shared = Tensor(np.broadcast_to(rng.standard_normal((1, 8, 1, 1)), (1, 8, 2, 2)).copy())
    raw = net.attention_scores(shared, sem, 2).data
    assert np.allclose(raw, raw[:, :, :1, :1], atol=0)
    # per-location two-layer oracle
    fmap = rng.standard_normal((1, 8, 2, 2))
    raw = net.attention_scores(Tensor(fmap), sem, 2).data
    W1, b1 = net.params["branch2.attn1.weight"].data, net.params["branch2.attn1.bias"].data
    W2, b2 = net.params["branch2.attn2.weight"].data, net.params["branch2.attn2.bias"].data
    for h in range(2):
        for w in range(2):
            z = np.concatenate([fmap[0, :, h, w], sem.data[0]])[None]
            hidden = np.tanh(np.array(oracles.linear(z, W1, b1)))
            np.testing.assert_allclose(raw[0, :, h, w], oracles.linear(hidden, W2, b2)[0], atol=1e-12)
    for name in ("attn1", "attn2"):
        net.params[f"branch2.{name}.weight"].data[:] = 0
    net.params["branch2.attn2.bias"].data = np.arange(8.0)
    raw = net.attention_scores(Tensor(fmap), sem, 2).data
    assert np.array_equal(raw, np.broadcast_to(np.arange(8.0)[None, :, None, None], raw.shape))


def test_attention_location_equivariance(net):
    rng = np.random.default_rng(5)
    fmap = rng.standard_normal((1, 8, 3, 3))
    sem = Tensor(rng.standard_normal((1, 5)))
    perm = rng.permutation(9)
    permuted = fmap.reshape(1, 8, 9)[:, :, perm].reshape(1, 8, 3, 3)
    raw = net.attention_scores(Tensor(fmap), sem, 2).data.reshape(1, 8, 9)
    raw_p = net.attention_scores(Tensor(permuted), sem, 2).data.reshape(1, 8, 9)
    np.testing.assert_allclose(raw_p, raw[:, :, perm], atol=1e-14)
    agg = attend_aggregate(Tensor(fmap), normalize_attention(Tensor(raw.reshape(1, 8, 3, 3)))).data
    agg_p = attend_aggregate(Tensor(permuted), normalize_attention(Tensor(raw_p.reshape(1, 8, 3, 3)))).data
    np.testing.assert_allclose(agg, agg_p, atol=1e-14)


# -- attention normalization and aggregation ---------------------------------------------------

def test_normalize_attention_examples():
    assert np.all(normalize_attention(Tensor(np.full((1, 1, 2, 2), 3.0))).data == 0.25)
    e = normalize_attention(Tensor(np.array([10.0, 0, 0, 0]).reshape(1, 1, 2, 2))).data.ravel()
    ref = oracles.softmax([10.0, 0.0, 0.0, 0.0])
    np.testing.assert_allclose(e, ref, atol=1e-15)
    np.testing.assert_allclose(e, [0.999864, 0.0000454, 0.0000454, 0.0000454], rtol=1e-3)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-100, 100))
def test_normalized_attention_is_a_distribution_and_shift_invariant(seed, shift):
    raw = np.random.default_rng(seed).normal(0, 5, (2, 3, 3, 4))
    e = normalize_attention(Tensor(raw)).data
    assert np.all(e >= 0)
    assert np.all(np.abs(e.sum(axis=(2, 3)) - 1) < 1e-6)
    np.testing.assert_allclose(normalize_attention(Tensor(raw + shift)).data, e, atol=1e-12)


def test_attend_aggregate_cases():
    rng = np.random.default_rng(6)
    fmap = rng.standard_normal((2, 3, 4, 4))
    uniform = np.full_like(fmap, 1 / 16)
    assert np.array_equal(attend_aggregate(Tensor(fmap), Tensor(uniform)).data,
                          T.global_avg_pool(Tensor(fmap)).data)
    onehot = np.zeros_like(fmap)
    onehot[:, :, 2, 1] = 1
    assert np.array_equal(attend_aggregate(Tensor(fmap), Tensor(onehot)).data, fmap[:, :, 2, 1])
    with pytest.raises(ValueError):
        attend_aggregate(Tensor(fmap), Tensor(uniform[:, :2]))


# -- fusion and full forward ---------------------------------------------------------------------

def test_fuse_scores_examples():
    v = Tensor([[0.3, -1.0]])
    assert np.array_equal(fuse_scores(v, v, v).data, v.data)
    out = fuse_scores(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]]), Tensor([[2.0, 2.0]]))
    assert out.data.tolist() == [[1.0, 1.0]]
    rng = np.random.default_rng(7)
    a, b, c = (Tensor(rng.standard_normal((3, 5))) for _ in range(3))
    shifted = fuse_scores(a + 2.5, b + 2.5, c + 2.5).data
    np.testing.assert_allclose(shifted, fuse_scores(a, b, c).data + 2.5, atol=1e-14)
    assert np.array_equal(np.argmax(shifted, 1), np.argmax(fuse_scores(a, b, c).data, 1))


def test_level_scores_shapes_and_mean(net, images):
    scores = hse_forward(images, net, TAX3)
    assert [s.s_final.shape for s in scores] == [(2, n) for n in TAX3.level_sizes]
    assert scores[0].s_guided is None and scores[0].attention is None
    s = scores[2]
    np.testing.assert_allclose(s.s_final.data, (s.s_guided.data + s.s_unguided.data + s.s_concat.data) / 3,
                               atol=1e-14)
    assert s.attention.normalized.shape == (2, 8, 4, 4)
    np.testing.assert_array_equal(s.s_extended_from_parent.data,
                                  np.take(scores[1].s_final.data, TAX3.parent_map(3), axis=1))


def test_single_level_model():
    tax = Taxonomy.from_parents([["x", "y", "z"]], [])
    net = HSENetwork(small_config(tax), tax)
    out = net.forward(np.zeros((1, 3, 16, 16)))
    assert len(out) == 1 and out[0].s_final.shape == (1, 3)


def test_without_serl_levels_are_independent(images):
    net = HSENetwork(small_config(enable_serl=False), TAX3, seed=1)
    f_I = net.trunk_forward(Tensor(images))
    scores = net.forward(None, f_I=f_I)
    prev = scores[0]
    prev.s_final = Tensor(prev.s_final.data + 100.0)
    again = net.level_forward(f_I, 2, prev)
    assert np.array_equal(again.s_final.data, scores[1].s_final.data)


@pytest.mark.parametrize("serl", [False, True])
def test_cross_level_gradient(images, serl):
    net = HSENetwork(small_config(enable_serl=serl, detach_guidance=False), TAX3, seed=1)
    f_I = net.trunk_forward(Tensor(images))
    prev = net.forward(None, levels=1, f_I=f_I)[0]
    s_prev = Tensor(prev.s_final.data, requires_grad=True)
    prev.s_final = s_prev
    out = net.level_forward(f_I, 2, prev).s_final
    T.backward(T.sum(out))
    grad = np.zeros_like(s_prev.data) if s_prev.grad is None else s_prev.grad
    assert (np.abs(grad).max() > 0) == serl


def test_guidance_is_detached_by_default(net, images):
    f_I = net.trunk_forward(Tensor(images))
    prev = net.forward(None, levels=1, f_I=f_I)[0]
    s_prev = Tensor(prev.s_final.data, requires_grad=True)
    prev.s_final = s_prev
    T.backward(T.sum(net.level_forward(f_I, 2, prev).s_final))
    assert s_prev.grad is None


def test_attention_needs_a_grid():
    net = HSENetwork(small_config(), TAX3)
    with pytest.raises(ConfigError):
        net.forward(np.zeros((1, 3, 4, 4)))


def test_matches_recorded_golden_run():
    spec = importlib.util.spec_from_file_location("make_golden", ROOT / "scripts" / "make_golden.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    golden = checkpoint.load(ROOT / "tests" / "data" / "golden_forward.ntc")
    now = mod.toy_scores()
    assert sorted(golden) == sorted(now)
    for name, arr in golden.items():
        np.testing.assert_allclose(now[name], arr, rtol=0, atol=1e-12, err_msg=name)
