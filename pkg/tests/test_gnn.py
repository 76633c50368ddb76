import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gdmpolicy import autodiff as ad
from gdmpolicy.config import ConfigError, GnnConfig
from gdmpolicy.gnn import (filter_sum, gcn_layer, init_params, predict_noise, read_in,
                           sinusoidal_embed, time_features)

from helpers import central_diff, rel_error

SMALL = GnnConfig(n_layers=2, features=5, filter_hops=2, embed_dim=6)


def random_gso(rng, n):
    h = rng.uniform(0, 1, (n, n))
    return h / h.max()


def test_embed_at_zero():
    assert np.array_equal(sinusoidal_embed(0, 8), np.tile([0.0, 1.0], 4))


def test_embed_bounded():
    e = sinusoidal_embed(np.arange(0, 1001), 16)
    assert np.all(np.abs(e) <= 1.0)


@pytest.mark.parametrize("k", [1, 17, 499])
def test_embed_hand_values(k):
    # dim 4: frequencies 1 and 1/100
    expect = [math.sin(k), math.cos(k), math.sin(k / 100), math.cos(k / 100)]
    assert np.allclose(sinusoidal_embed(k, 4), expect, rtol=0, atol=1e-15)


def test_read_in_equal_nodes_equal_rows(rng):
    p = init_params(SMALL, 0)
    z = read_in(np.array([0.3, -0.1, 0.3]), 40, p).data
    assert np.array_equal(z[0], z[2]) and not np.array_equal(z[0], z[1])


def test_read_in_depends_on_k(rng):
    p = init_params(SMALL, 0)
    x = rng.standard_normal(4)
    assert not np.allclose(read_in(x, 3, p).data, read_in(x, 300, p).data)


def test_read_in_zero_lift_gives_time_features(rng):
    p = init_params(SMALL, 0)
    p["readin.w"].data[:] = 0.0
    p["readin.b"].data[:] = 0.0
    z = read_in(rng.standard_normal(5), 12, p).data
    t = time_features(np.asarray(12), p).data
    assert np.allclose(z, np.broadcast_to(t, z.shape), rtol=0, atol=0)


def test_filter_sum_matrix_power_oracle(rng):
    p = init_params(GnnConfig(n_layers=1, features=4, filter_hops=3, embed_dim=3), 1)
    z = rng.standard_normal((3, 3))
    h = random_gso(rng, 3)
    got = filter_sum(ad.Tensor(z), h, p, 0).data
    expect = sum(np.linalg.matrix_power(h, m) @ z @ p[f"gcn0.tap{m}"].data for m in range(4))
    assert np.allclose(got, expect, rtol=1e-12, atol=1e-12)


def test_residual_only_layer_ignores_graph(rng):
    p = init_params(SMALL, 2)
    z = ad.Tensor(rng.standard_normal((4, 6)))
    h = random_gso(rng, 4)
    base = ad.relu(ad.layer_normalize(ad.matmul(z, p["gcn0.tap0"]), p["gcn0.gain"], p["gcn0.bias"], 1e-12)).data
    assert np.allclose(gcn_layer(z, np.zeros((4, 4)), p, 0).data, base, rtol=0, atol=1e-14)
    for m in (1, 2):
        p[f"gcn0.tap{m}"].data[:] = 0.0
    assert np.allclose(gcn_layer(z, h, p, 0).data, base, rtol=0, atol=1e-14)


def test_output_shape_and_batching(rng):
    p = init_params(SMALL, 3)
    h = np.stack([random_gso(rng, 6) for _ in range(2)])
    x = rng.standard_normal((2, 5, 6))
    k = rng.integers(1, 100, size=(2, 5))
    out = predict_noise(x, k, h, p).data
    assert out.shape == (2, 5, 6)
    single = predict_noise(x[1, 3], k[1, 3], h[1], p).data
    assert np.allclose(out[1, 3], single, rtol=1e-12, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 9))
def test_permutation_equivariance(seed, n):
    rng = np.random.default_rng(seed)
    p = init_params(SMALL, seed)
    h, x = random_gso(rng, n), rng.standard_normal(n)
    perm = rng.permutation(n)
    out = predict_noise(x, 77, h, p).data
    out_p = predict_noise(x[perm], 77, h[np.ix_(perm, perm)], p).data
    assert np.max(np.abs(out_p - out[perm])) <= 1e-8


def test_isomorphic_networks(rng):
    p = init_params(SMALL, 4)
    h, x = random_gso(rng, 5), rng.standard_normal(5)
    perm = np.array([3, 0, 4, 1, 2])
    h2 = h[np.ix_(perm, perm)]
    inv = np.argsort(perm)
    back = predict_noise(x[perm], 5, h2, p).data[inv]
    assert np.allclose(back, predict_noise(x, 5, h, p).data, rtol=0, atol=1e-12)


def test_parameter_count_independent_of_n(rng):
    p = init_params(SMALL, 0)
    before = p.count()
    predict_noise(rng.standard_normal(8), 1, random_gso(rng, 8), p)
    predict_noise(rng.standard_normal(16), 1, random_gso(rng, 16), p)
    assert p.count() == before


def test_parameter_count_formula():
    cfg = GnnConfig(n_layers=2, features=(4, 3), filter_hops=(1, 2), embed_dim=5)
    f0 = 5
    expect = 2 * f0 + 2 * (f0 * f0 + f0) + (2 * f0 * 4 + 2 * 4) + (3 * 4 * 3 + 2 * 3) + (3 * 3 + 3 + 3 + 1)
    assert init_params(cfg, 0).count() == expect


@pytest.mark.parametrize("act", ["relu", "silu"])
def test_noise_loss_gradient_fd(rng, act):
    cfg = GnnConfig(n_layers=2, features=3, filter_hops=2, embed_dim=4, nonlinearity=act)
    p = init_params(cfg, 5)
    h, x, eps = random_gso(rng, 4), rng.standard_normal(4), rng.standard_normal(4)

    def loss():
        d = ad.sub(predict_noise(x, 9, h, p), eps)
        return ad.reduce_sum(ad.mul(d, d))

    p.zero_grad()
    with ad.Tape() as tape:
        out = loss()
    tape.backward(out)
    tensors = list(p.tensors.values())
    numeric = central_diff(lambda: float(loss().data), [t.data for t in tensors])
    for t, n in zip(tensors, numeric):
        assert rel_error(t.grad, n) <= 1e-5, t.name


def test_flat_roundtrip_and_manifest():
    p = init_params(SMALL, 6)
    vec = p.flat()
    q = init_params(SMALL, 7)
    q.set_flat(vec)
    assert np.array_equal(q.flat(), vec)
    offsets = [o for _, _, o in p.manifest()]
    sizes = [int(np.prod(s)) for _, s, _ in p.manifest()]
    assert offsets == list(np.cumsum([0] + sizes[:-1]))
    with pytest.raises(ValueError):
        q.set_flat(vec[:-1])


def test_copy_is_independent():
    p = init_params(SMALL, 0)
    c = p.copy()
    c["readout.b2"].data[:] = 123.0
    assert p["readout.b2"].data[0] != 123.0


def test_init_scaling():
    p = init_params(GnnConfig(n_layers=1, features=50, embed_dim=40), 0)
    w = p["gcn0.tap0"].data
    assert np.all(np.abs(w) <= 1 / math.sqrt(40))
    assert np.all(p["gcn0.gain"].data == 1.0) and np.all(p["gcn0.bias"].data == 0.0)


@pytest.mark.parametrize("bad", [dict(n_layers=0), dict(features=0), dict(filter_hops=-1),
                                 dict(n_layers=2, features=(3,)), dict(nonlinearity="tanh")])
def test_invalid_gnn_config(bad):
    with pytest.raises(ConfigError):
        GnnConfig(**bad)
