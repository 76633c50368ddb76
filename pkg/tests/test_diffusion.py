import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gdmpolicy import autodiff as ad
from gdmpolicy.config import ScheduleConfig
from gdmpolicy.diffusion import (DiffusionBatch, ddpm_loss, ddpm_step, ddpm_update, from_diffusion_space,
                                 loss_weight, make_schedule, q_sample, reverse_chain, sample_policy, snr,
                                 to_diffusion_space)
from gdmpolicy.gnn import init_params
from gdmpolicy.config import GnnConfig

TINY = GnnConfig(n_layers=1, features=4, filter_hops=1, embed_dim=4)


def cosine_oracle(k, K, s=0.008):
    f = lambda t: math.cos((t / K + s) / (1 + s) * math.pi / 2) ** 2
    return f(k) / f(0)


@pytest.mark.parametrize("kind", ["cosine", "linear"])
def test_schedule_identities(kind):
    s = make_schedule(kind, 500)
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.array_equal(s.alpha[1:], 1.0 - s.beta[1:])
    for k in range(1, 501):
        assert s.alpha_bar[k] == s.alpha_bar[k - 1] * (1.0 - s.beta[k])
    assert np.all((s.beta[1:] > 0) & (s.beta[1:] < 1))
    var = (1 - s.alpha_bar[:-1]) / (1 - s.alpha_bar[1:]) * s.beta[1:]
    assert np.allclose(s.sigma[1:] ** 2, var, rtol=1e-12, atol=0)


def test_cosine_terminal_and_formula():
    s = make_schedule("cosine", 500)
    assert s.alpha_bar[500] < 1e-3
    assert s.beta.max() <= 0.999
    # away from the clamp the cumulative product reproduces the closed form
    for k in (1, 100, 250, 400):
        assert s.alpha_bar[k] == pytest.approx(cosine_oracle(k, 500), rel=1e-10)


def test_linear_endpoints_monotone():
    s = make_schedule("linear", 1000)
    assert s.beta[1] == pytest.approx(1e-4) and s.beta[1000] == pytest.approx(2e-2)
    assert np.all(np.diff(s.beta[1:]) >= 0)


@pytest.mark.parametrize("K", [0, -3])
def test_schedule_rejects_bad_k(K):
    with pytest.raises(ValueError):
        make_schedule("cosine", K)


def test_affine_map():
    p = 0.01
    assert to_diffusion_space(0.0, p) == -0.5 and to_diffusion_space(p, p) == 0.5
    x = np.linspace(0, p, 11)
    assert np.allclose(from_diffusion_space(to_diffusion_space(x, p), p), x, rtol=0, atol=1e-12 * p)
    assert from_diffusion_space(0.9, p) == p and from_diffusion_space(-2.0, p) == 0.0


def test_q_sample_examples(rng):
    s = make_schedule("cosine", 500)
    x0, eps = rng.uniform(-0.5, 0.5, 8), rng.standard_normal(8)
    assert np.array_equal(q_sample(x0, 0, eps, s), x0)
    ab = s.alpha_bar[37]
    assert q_sample(0.3, 37, -1.2, s) == pytest.approx(math.sqrt(ab) * 0.3 + math.sqrt(1 - ab) * -1.2, rel=1e-14)
    x0 = rng.uniform(-0.5, 0.5, 10_000)
    xk = q_sample(x0, np.full(10_000, 500), rng.standard_normal(10_000), s)
    assert abs(np.corrcoef(x0, xk)[0, 1]) < 0.05
    with pytest.raises(ValueError):
        q_sample(np.zeros(3), 1, np.zeros(4), s)


def test_snr_and_weights():
    s = make_schedule("cosine", 500)
    ab = s.alpha_bar[10]
    assert snr(10, s) == pytest.approx(ab / (1 - ab))
    assert snr(10, s, "alpha_ratio") == pytest.approx(s.alpha[10] ** 2 / s.sigma[10] ** 2)
    w = loss_weight(np.arange(1, 501), s)
    assert np.all((w >= 0.01) & (w <= 5.0))
    mid = 250
    assert loss_weight(mid, s) == pytest.approx(np.clip(math.log(s.alpha_bar[mid] / (1 - s.alpha_bar[mid])), 0.01, 5))
    # weight is nonincreasing in k: more noise, lower SNR
    assert np.all(np.diff(w) <= 0)


def _batch(rng, g=2, sig=3, n=4, K=500):
    x0 = rng.uniform(-0.5, 0.5, (g, sig, n))
    h = rng.uniform(0, 1, (g, n, n))
    return DiffusionBatch(x0=x0, k=rng.integers(1, K + 1, (g, sig)), epsilon=rng.standard_normal((g, sig, n)),
                          gso=h / h.max())


def test_loss_exact_predictor_is_zero(rng):
    s = make_schedule("cosine", 500)
    b = _batch(rng)
    loss = ddpm_loss(b, None, s, predictor=lambda x, k, h: b.epsilon)
    assert float(loss.data) == 0.0


def test_loss_zero_predictor_direct(rng):
    s = make_schedule("cosine", 500)
    b = _batch(rng)
    loss = ddpm_loss(b, None, s, predictor=lambda x, k, h: np.zeros_like(x))
    w = np.clip(np.log(s.alpha_bar[b.k] / (1 - s.alpha_bar[b.k])), 0.01, 5)
    expect = np.mean(w * (b.epsilon ** 2).sum(axis=-1))
    assert float(loss.data) == pytest.approx(expect, rel=1e-13)


def test_loss_single_element(rng):
    s = make_schedule("cosine", 500)
    b = DiffusionBatch(x0=np.array([[[0.1]]]), k=np.array([[200]]), epsilon=np.array([[[0.7]]]),
                       gso=np.ones((1, 1, 1)))
    loss = ddpm_loss(b, None, s, predictor=lambda x, k, h: np.full_like(x, 0.2))
    assert float(loss.data) == pytest.approx(float(loss_weight(200, s)) * 0.5 ** 2, rel=1e-14)


def test_batch_validation(rng):
    with pytest.raises(ValueError):
        DiffusionBatch(x0=np.full((1, 1, 2), 0.7), k=np.ones((1, 1), int), epsilon=np.zeros((1, 1, 2)),
                       gso=np.ones((1, 2, 2)))
    with pytest.raises(ValueError):
        DiffusionBatch(x0=np.zeros((1, 1, 2)), k=np.ones((1, 1), int), epsilon=np.full((1, 1, 2), np.nan),
                       gso=np.ones((1, 2, 2)))


def test_loss_gradient_fd(rng):
    from helpers import central_diff, rel_error

    s = make_schedule("cosine", 50)
    p = init_params(TINY, 1)
    b = _batch(rng, g=2, sig=2, n=3, K=50)
    p.zero_grad()
    with ad.Tape() as tape:
        loss = ddpm_loss(b, p, s)
    tape.backward(loss)
    tensors = list(p.tensors.values())
    num = central_diff(lambda: float(ddpm_loss(b, p, s).data), [t.data for t in tensors])
    for t, n in zip(tensors, num):
        assert rel_error(t.grad, n) <= 1e-5, t.name


def test_update_literal_formula():
    s = make_schedule("cosine", 500)
    k, x, e, w = 123, 0.4, -0.3, 1.1
    a, b, ab = s.alpha[k], s.beta[k], s.alpha_bar[k]
    expect = (x - b / math.sqrt(1 - ab) * e) / math.sqrt(a) + s.sigma[k] * w
    assert ddpm_update(x, k, e, s, w, clip_x0=False) == pytest.approx(expect, rel=1e-14)
    # zero noise estimate and zero noise: pure rescaling
    assert ddpm_update(x, k, 0.0, s, 0.0, clip_x0=False) == pytest.approx(x / math.sqrt(a), rel=1e-15)


@settings(max_examples=60, deadline=None)
@given(k=st.integers(1, 500), x0=st.floats(-0.5, 0.5), eps=st.floats(-3, 3), w=st.floats(-3, 3))
def test_clipped_update_matches_literal_inside_support(k, x0, eps, w):
    # eps_hat chosen so the implied clean sample is exactly x0
    s = make_schedule("cosine", 500)
    xk = math.sqrt(s.alpha_bar[k]) * x0 + math.sqrt(1 - s.alpha_bar[k]) * eps
    a = ddpm_update(xk, k, eps, s, w, clip_x0=True)
    b = ddpm_update(xk, k, eps, s, w, clip_x0=False)
    assert a == pytest.approx(b, rel=1e-6, abs=1e-6)


def test_clipped_update_bounded_at_final_clamp():
    s = make_schedule("cosine", 500)
    # a poor noise estimate at k = K is amplified ~30x by the literal update only
    lit = ddpm_update(1.0, 500, 0.9, s, 0.0, clip_x0=False)
    clp = ddpm_update(1.0, 500, 0.9, s, 0.0, clip_x0=True)
    assert abs(lit) > 3.0 and abs(clp) < 0.1


def test_step_determinism(rng):
    s = make_schedule("cosine", 100)
    p = init_params(TINY, 0)
    h = np.eye(3)
    x = rng.standard_normal(3)
    a = ddpm_step(x, 1, h, p, s, seed=1)
    b = ddpm_step(x, 1, h, p, s, seed=2)
    assert np.array_equal(a, b)
    assert not np.array_equal(ddpm_step(x, 5, h, p, s, 1), ddpm_step(x, 5, h, p, s, 2))
    with pytest.raises(ValueError):
        ddpm_step(x, 0, h, p, s, 1)


def test_sample_policy_contract(rng):
    s = make_schedule("cosine", 50)
    p = init_params(TINY, 0)
    h = rng.uniform(0, 1, (5, 5))
    a = sample_policy(h, p, s, 3, 0.01, n_samples=40)
    assert a.shape == (40, 5) and np.all((a >= 0) & (a <= 0.01))
    assert np.array_equal(a, sample_policy(h, p, s, 3, 0.01, n_samples=40))
    assert not np.array_equal(a, sample_policy(h, p, s, 4, 0.01, n_samples=40))
    assert sample_policy(h, p, s, 3, 0.01).shape == (5,)


def test_reverse_chain_nonfinite_raises():
    s = make_schedule("cosine", 20)
    p = init_params(TINY, 0)
    p["readout.b2"].data[:] = 1e308
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(FloatingPointError):
        reverse_chain(np.eye(2), p, s, 0, (2,), clip_x0=False)
