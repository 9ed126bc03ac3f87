import math
import time

import numpy as np
import pytest

from stdemand import diffcore as dc
from stdemand.diffcore import DiffArray
from stdemand.model import (
    DemandForecaster, LayerView, ModelConfig, aggregate_demand, embed, encoder_layer, init_separation_matrix,
    lambda_value, sinusoidal_encoding, spatial_cluster_attention, spatial_differential_attention,
    temporal_aggregation_attention, temporal_self_attention,
)
from stdemand.clustering import Partition

from oracles import dense_sca, dense_sda, dense_standard_attention, dense_taa, dense_tsa

MONDAY = 1704067200


def rand(rng, *shape):
    return rng.normal(size=shape)


def leaf(x):
    return DiffArray(np.asarray(x, dtype=np.float64), requires_grad=True)


def calendar(rng, B, T):
    tf = np.zeros((B, T, 1, 8))
    tf[..., 0] = rng.uniform(0, 1, size=(B, T, 1))
    tf[np.arange(B)[:, None], np.arange(T)[None, :], 0, 1 + rng.integers(0, 7, size=(B, T))] = 1.0
    return tf


def toy_model(n=6, levels=(3,), d=16, layers=2, slots=2, horizon=2, seed=0):
    maps = []
    for m in levels:
        maps.append(Partition(np.arange(n) % m, m).cluster_map())
    cfg = ModelConfig(d_model=d, n_layers=layers, horizon=horizon, n_temporal_slots=slots)
    return DemandForecaster(cfg, n, maps, seed=seed)


# -- small pieces -------------------------------------------------------------------

def test_sinusoidal_encoding():
    pe = sinusoidal_encoding(6, 8)
    assert np.all(pe[0, 0::2] == 0) and np.all(pe[0, 1::2] == 1)
    assert pe[1, 0] == pytest.approx(0.8415, abs=1e-4)
    assert np.all(np.abs(pe) <= 1)


def test_lambda_examples():
    z = np.zeros(4)
    assert lambda_value(z, z, z, z, 0.8).item() == 0.8
    q1 = np.array([math.log(2.0), 0, 0, 0])
    assert lambda_value(q1, np.array([1.0, 0, 0, 0]), z, z, 0.8).item() == pytest.approx(1.8, abs=1e-15)
    rng = np.random.default_rng(0)
    a, b, c, e = (rand(rng, 4) for _ in range(4))
    forward = lambda_value(a, b, c, e, 0.3).item() - 0.3
    swapped = lambda_value(c, e, a, b, 0.3).item() - 0.3
    assert forward == pytest.approx(-swapped, abs=1e-14)


def test_embed_decomposition_and_shape():
    rng = np.random.default_rng(1)
    B, T, N, d = 2, 6, 8, 64
    tf = calendar(rng, B, T)
    w = [rand(rng, 1, d), rand(rng, 1, d), rand(rng, 7, d)]
    spatial, pos = rand(rng, N, d), sinusoidal_encoding(T, d)
    out = embed(rand(rng, B, T, N, 1), tf, *w, spatial, pos)
    assert out.shape == (B, T, N, d)
    zero = embed(np.zeros((B, T, N, 1)), tf, *w, spatial, pos).data
    expected = tf[..., :1] @ w[1] + tf[..., 1:] @ w[2] + pos[None, :, None] + spatial
    np.testing.assert_allclose(zero, expected, atol=1e-12)
    zeros = [np.zeros_like(x) for x in w]
    assert np.all(embed(rand(rng, B, T, N, 1), tf, *zeros, np.zeros((N, d)), np.zeros((T, d))).data == 0)


def test_aggregate_demand():
    x = np.array([3.0, 4.0, 1.0]).reshape(1, 1, 3, 1)
    cmap = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    np.testing.assert_array_equal(aggregate_demand(x, cmap).ravel(), [7.0, 1.0])
    np.testing.assert_array_equal(aggregate_demand(x, cmap, "mean").ravel(), [3.5, 1.0])
    y = np.random.default_rng(2).normal(size=(2, 6, 4, 1))
    np.testing.assert_array_equal(aggregate_demand(y, np.eye(4)), y)


def test_separation_matrix_init():
    cmap = Partition(np.array([0, 1, 0, 2, 1]), 3).cluster_map()
    sep = init_separation_matrix(cmap, np.random.default_rng(0))
    assert np.all(sep[cmap == 0] == 0)
    inside = sep[cmap == 1]
    assert np.all((inside >= 0) & (inside < 1))


# -- attention branches against dense oracles ---------------------------------------------------

def test_sda_matches_oracle():
    rng = np.random.default_rng(3)
    x = rand(rng, 2, 3, 3, 8)
    w = [rand(rng, 8, 8) for _ in range(3)]
    out = spatial_differential_attention(x, *w, 0.7).data
    np.testing.assert_allclose(out, dense_sda(x, *w, 0.7), atol=1e-12)
    np.testing.assert_allclose(spatial_differential_attention(x, *w, 0.0).data,
                               dense_standard_attention(x, *w), atol=1e-12)


def test_sda_single_region():
    rng = np.random.default_rng(4)
    x = rand(rng, 1, 2, 1, 4)
    w = [rand(rng, 4, 4) for _ in range(3)]
    np.testing.assert_allclose(spatial_differential_attention(x, *w, 0.3).data, 0.7 * (x @ w[2]), atol=1e-14)


def test_sda_argmax_shift_invariance():
    rng = np.random.default_rng(5)
    x = rand(rng, 1, 1, 5, 4)
    w = [rand(rng, 4, 4) for _ in range(3)]
    logs = []
    spatial_differential_attention(x, *w, 0.5, attn=logs)
    first = dict(logs)["sda.1"]
    shifted = dc.softmax_last_axis(np.log(first) + 3.0).data
    assert np.array_equal(first.argmax(-1), shifted.argmax(-1))


def test_sca_matches_oracle_and_degenerate_cases():
    rng = np.random.default_rng(6)
    xa = rand(rng, 2, 3, 2, 8)
    w = [rand(rng, 8, 8) for _ in range(3)]
    sep = init_separation_matrix(Partition(np.array([0, 0, 1, 1]), 2).cluster_map(), rng)
    out = spatial_cluster_attention(xa, *w, sep).data
    assert out.shape == (2, 3, 4, 8)
    np.testing.assert_allclose(out, dense_sca(xa, *w, sep), atol=1e-12)
    xr = rand(rng, 1, 2, 4, 8)
    np.testing.assert_allclose(spatial_cluster_attention(xr, *w, np.eye(4)).data, dense_tsa(
        np.swapaxes(xr, 1, 2), *w).swapaxes(1, 2), atol=1e-12)
    one = rand(rng, 1, 2, 1, 8)
    out = spatial_cluster_attention(one, *w, np.ones((1, 5))).data
    np.testing.assert_allclose(out, np.repeat(one @ w[2], 5, axis=2), atol=1e-14)


def test_tsa_matches_oracle_and_edge_cases():
    rng = np.random.default_rng(7)
    x = rand(rng, 2, 3, 4, 8)
    w = [rand(rng, 8, 8) for _ in range(3)]
    np.testing.assert_allclose(temporal_self_attention(x, *w).data, dense_tsa(x, *w), atol=1e-12)
    single = rand(rng, 1, 1, 3, 8)
    np.testing.assert_allclose(temporal_self_attention(single, *w).data, single @ w[2], atol=1e-14)
    same = np.repeat(rand(rng, 1, 1, 2, 8), 4, axis=1)
    logs = []
    temporal_self_attention(same, *w, attn=logs)
    np.testing.assert_allclose(logs[0][1], 0.25, atol=1e-15)


def test_taa_matches_oracle_and_edge_cases():
    rng = np.random.default_rng(8)
    B, T, N, d, P = 2, 3, 2, 8, 2
    x = rand(rng, B, T, N, d)
    tf = calendar(rng, B, T)
    slots, wk, wv, wsep = rand(rng, N, P, d), rand(rng, d, d), rand(rng, d, d), rand(rng, 8, P)
    out = temporal_aggregation_attention(x, tf, slots, wk, wv, wsep).data
    np.testing.assert_allclose(out, dense_taa(x, tf[:, :, 0], slots, wk, wv, wsep), atol=1e-12)
    zero = temporal_aggregation_attention(x, tf, slots, wk, wv, np.zeros((8, P))).data
    np.testing.assert_allclose(zero, np.broadcast_to((x @ wv).mean(axis=1, keepdims=True), x.shape), atol=1e-12)
    single = temporal_aggregation_attention(x[:, :1], tf[:, :1], slots, wk, wv, wsep).data
    np.testing.assert_allclose(single, x[:, :1] @ wv, atol=1e-14)


@pytest.mark.parametrize("branch", ["sda", "sca", "tsa", "taa"])
def test_branch_grad_check(branch):
    rng = np.random.default_rng(9)
    d = 4
    x = leaf(rand(rng, 1, 3, 4, d))
    w = [leaf(rand(rng, d, d)) for _ in range(3)]
    weight = rand(rng, 1, 3, 4, d)
    if branch == "sda":
        lam = [leaf(0.1 * rand(rng, 2)) for _ in range(4)]
        fn = lambda: (spatial_differential_attention(x, *w, lambda_value(*lam, 0.8)) * weight).sum()  # noqa: E731
        params = [x, *w, *lam]
    elif branch == "sca":
        xa = leaf(rand(rng, 1, 3, 2, d))
        sep = leaf(init_separation_matrix(Partition(np.array([0, 1, 0, 1]), 2).cluster_map(), rng))
        fn = lambda: (spatial_cluster_attention(xa, *w, sep) * weight).sum()  # noqa: E731
        params = [xa, *w, sep]
    elif branch == "tsa":
        fn = lambda: (temporal_self_attention(x, *w) * weight).sum()  # noqa: E731
        params = [x, *w]
    else:
        tf = calendar(rng, 1, 3)
        slots, wsep = leaf(rand(rng, 4, 2, d)), leaf(rand(rng, 8, 2))
        fn = lambda: (temporal_aggregation_attention(x, tf, slots, w[0], w[1], wsep) * weight).sum()  # noqa: E731
        params = [x, slots, w[0], w[1], wsep]
    assert dc.grad_check(fn, params) < 1e-4


# -- encoder layer and full model -----------------------------------------------------------

def test_encoder_layer_zero_projection_contract():
    model = toy_model(n=4, levels=(2,), d=8, layers=1)
    p = model.params
    p["layer0.out"].data[:] = 0
    p["layer0.mlp.w2"].data[:] = 0
    rng = np.random.default_rng(10)
    x = rand(rng, 2, 6, 4, 8)
    tf = calendar(rng, 2, 6)
    _, streams = model.embed_inputs(rand(rng, 2, 6, 4, 1), tf)
    out = encoder_layer(x, streams, tf, LayerView(p, "layer0."), 0.8).data
    ones, zeros = np.ones(8), np.zeros(8)
    expected = dc.layer_norm(dc.layer_norm(x, ones, zeros), ones, zeros).data
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_empty_hierarchy_wiring():
    model = toy_model(levels=(), d=8)
    assert model.params["layer0.out"].shape == (24, 8)
    assert not any(".sca" in name for name in model.params)
    assert toy_model(levels=(3,), d=8).params["layer0.out"].shape == (32, 8)


def test_forward_shape_determinism_and_attention_rows():
    rng = np.random.default_rng(11)
    cfg = ModelConfig(d_model=16, n_layers=2, horizon=3)
    model = DemandForecaster(cfg, 8, [Partition(np.arange(8) % 4, 4).cluster_map()], seed=1)
    x, tf = rand(rng, 2, 6, 8, 1), calendar(rng, 2, 6)
    logs = []
    a = model(x, tf, attn=logs).data
    b = model(x, tf).data
    assert a.shape == (2, 3, 8, 1) and np.array_equal(a, b)
    assert {name for name, _ in logs} == {"sda.1", "sda.2", "sca", "tsa", "taa"}
    for _, w in logs:
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)
    with pytest.raises(ValueError):
        model(rand(rng, 2, 5, 8, 1), tf)


def test_model_rejects_bad_maps():
    cfg = ModelConfig(d_model=8, n_layers=1)
    with pytest.raises(ValueError):
        DemandForecaster(cfg, 4, [np.ones((2, 4))])
    with pytest.raises(ValueError):
        DemandForecaster(cfg, 4, [np.eye(3)])
    with pytest.raises(ValueError):
        DemandForecaster(ModelConfig(d_model=8, level_counts=(2,)), 4, [])


def permuted_model(model, perm):
    maps = [m[:, perm] for m in model.cluster_maps]
    twin = DemandForecaster(model.config, model.n_regions, maps)
    state = model.params.state_dict()
    for name, value in state.items():
        if name == "embed.region" or name.endswith("taa.slots"):
            state[name] = value[perm]
        elif name.endswith(".separation"):
            state[name] = value[:, perm]
    twin.params.load_state_dict(state)
    return twin


def test_region_equivariance():
    rng = np.random.default_rng(12)
    model = toy_model(n=6, levels=(3,), d=16, layers=2)
    perm = rng.permutation(6)
    x, tf = rand(rng, 2, 6, 6, 1), calendar(rng, 2, 6)
    out = model.predict(x, tf)
    out_p = permuted_model(model, perm).predict(x[:, :, perm], tf)
    assert np.max(np.abs(out_p - out[:, :, perm])) < 1e-9


def test_full_model_grad_check_subset():
    rng = np.random.default_rng(13)
    model = toy_model(n=3, levels=(2,), d=8, layers=1, slots=2, horizon=1)
    x, tf = rand(rng, 1, 6, 3, 1), calendar(rng, 1, 6)
    weight = rand(rng, 1, 1, 3, 1)
    params = list(model.params.values())
    err = dc.grad_check(lambda: (model(x, tf) * weight).sum(), params)
    assert err < 1e-4


def test_forward_speed():
    rng = np.random.default_rng(14)
    maps = [Partition(np.arange(32) % 8, 8).cluster_map(), Partition(np.arange(32) % 4, 4).cluster_map()]
    model = DemandForecaster(ModelConfig(d_model=64, n_layers=4), 32, maps)
    x, tf = rand(rng, 4, 6, 32, 1), calendar(rng, 4, 6)
    start = time.perf_counter()
    model.predict(x, tf)
    assert time.perf_counter() - start < 5.0


def test_state_dict_roundtrip():
    model = toy_model()
    twin = toy_model(seed=5)
    twin.params.load_state_dict(model.params.state_dict())
    for name, p in model.params.items():
        assert np.array_equal(p.data, twin.params[name].data)
    bad = model.params.state_dict()
    bad["head.bias"] = np.zeros(7)
    with pytest.raises(ValueError):
        twin.params.load_state_dict(bad)
