import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from motiondiff.diffusion import (DiffusionState, PredictionSet, elbo_terms, forward_diffuse,
                                  gaussian_kl_to_standard, reverse_step, sample, sample_chains,
                                  simplified_loss)
from motiondiff.errors import NumericError
from motiondiff.metrics import apd
from motiondiff.networks import NetworkConfig, build_model
from motiondiff.schedule import build_linear_schedule

SCHED = build_linear_schedule(100, 1e-4, 0.05)
SHAPE = (3, 2, 3)


def zero_predictor(xk, k, C):
    return torch.zeros_like(xk)


def _x0(seed=0):
    return torch.from_numpy(np.random.default_rng(seed).normal(size=SHAPE))


def test_forward_zero_noise_scales_signal():
    x0 = _x0()
    for k in (1, 37, 100):
        out = forward_diffuse(SCHED, x0, k, torch.zeros_like(x0))
        assert torch.allclose(out.data, math.sqrt(SCHED.alpha_bar(k)) * x0, rtol=0, atol=1e-15)
        assert out.k == k


def test_forward_zero_signal_is_scaled_noise():
    eps = _x0(1)
    out = forward_diffuse(SCHED, torch.zeros(SHAPE, dtype=torch.float64), 100, eps)
    assert torch.allclose(out.data, math.sqrt(1 - SCHED.alpha_bar(100)) * eps, atol=1e-15)


def test_forward_errors():
    x0 = _x0()
    with pytest.raises(ValueError):
        forward_diffuse(SCHED, x0, 5, torch.zeros(2, 2, 3))
    for k in (0, 101):
        with pytest.raises(IndexError):
            forward_diffuse(SCHED, x0, k, torch.zeros_like(x0))


def test_forward_batched_steps_match_scalar_calls():
    x0 = torch.from_numpy(np.random.default_rng(2).normal(size=(4, *SHAPE)))
    eps = torch.from_numpy(np.random.default_rng(3).normal(size=(4, *SHAPE)))
    ks = torch.tensor([1, 10, 50, 100])
    batched = forward_diffuse(SCHED, x0, ks, eps).data
    for i, k in enumerate(ks.tolist()):
        assert torch.equal(batched[i], forward_diffuse(SCHED, x0[i], k, eps[i]).data)


def test_forward_marginal_monte_carlo():
    # scalar x0, M draws of eps: sample mean/var vs closed form, 5 standard errors
    M, x0, k = 100_000, 0.7, 40
    eps = torch.from_numpy(np.random.default_rng(4).standard_normal(M))
    xs = forward_diffuse(SCHED, torch.full((M,), x0, dtype=torch.float64), k, eps).data.numpy()
    ab = SCHED.alpha_bar(k)
    var = 1 - ab
    assert abs(xs.mean() - math.sqrt(ab) * x0) < 5 * math.sqrt(var / M)
    # Var of the sample variance for a Gaussian is 2 var^2 / (M - 1)
    assert abs(xs.var(ddof=1) - var) < 5 * var * math.sqrt(2 / (M - 1))


@settings(max_examples=40, deadline=None)
@given(k=st.integers(1, 100), seed=st.integers(0, 2**32 - 1))
def test_oracle_denoise_recovers_x0(k, seed):
    rng = np.random.default_rng(seed)
    x0 = torch.from_numpy(rng.normal(size=SHAPE))
    eps = torch.from_numpy(rng.normal(size=SHAPE))
    xk = forward_diffuse(SCHED, x0, k, eps).data
    ab = SCHED.alpha_bar(k)
    rec = (xk - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
    assert torch.allclose(rec, x0, rtol=0, atol=1e-10)


def test_loss_zero_for_perfect_predictor():
    x0, eps = _x0(), _x0(5)
    loss = simplified_loss(SCHED, lambda xk, k, C: eps, x0, None, 10, eps)
    assert loss.item() == 0.0


def test_loss_for_zero_predictor_is_noise_energy():
    x0 = _x0()
    rng = np.random.default_rng(6)
    vals = []
    for _ in range(4000):
        eps = torch.from_numpy(rng.standard_normal(SHAPE))
        loss = simplified_loss(SCHED, zero_predictor, x0, None, int(rng.integers(1, 101)), eps)
        assert loss.item() == pytest.approx(float((eps ** 2).sum()), abs=1e-12)
        vals.append(loss.item())
    n = int(np.prod(SHAPE))
    # chi-square with n dof: mean n, variance 2n
    assert abs(np.mean(vals) - n) < 5 * math.sqrt(2 * n / len(vals))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 100))
def test_loss_nonnegative(seed, k):
    rng = np.random.default_rng(seed)
    W = torch.from_numpy(rng.normal(size=(3, 3)))
    x0, eps = (torch.from_numpy(rng.normal(size=SHAPE)) for _ in range(2))
    loss = simplified_loss(SCHED, lambda xk, k, C: torch.sin(xk @ W), x0, None, k, eps)
    assert loss.item() >= 0


def test_loss_batched_is_mean_of_examples():
    rng = np.random.default_rng(7)
    x0 = torch.from_numpy(rng.normal(size=(5, *SHAPE)))
    eps = torch.from_numpy(rng.normal(size=(5, *SHAPE)))
    ks = torch.from_numpy(rng.integers(1, 101, size=5))
    pred = lambda xk, k, C: 0.5 * xk  # noqa: E731
    batched = simplified_loss(SCHED, pred, x0, None, ks, eps).item()
    single = [simplified_loss(SCHED, pred, x0[i], None, int(ks[i]), eps[i]).item() for i in range(5)]
    assert batched == pytest.approx(np.mean(single), rel=1e-12)


def test_reverse_zero_predictor_zero_noise():
    x = _x0()
    for k in (1, 2, 60, 100):
        out = reverse_step(SCHED, zero_predictor, DiffusionState(k, x), None, torch.zeros_like(x))
        assert out.k == k - 1
        assert torch.allclose(out.data, x / math.sqrt(SCHED.alpha(k)), rtol=1e-15, atol=0)


def test_reverse_noise_variance_is_beta():
    k, M = 70, 100_000
    x = torch.zeros(M, dtype=torch.float64)
    z = torch.from_numpy(np.random.default_rng(8).standard_normal(M))
    out = reverse_step(SCHED, zero_predictor, DiffusionState(k, x), None, z).data.numpy()
    beta = SCHED.beta(k)
    assert abs(out.var(ddof=1) - beta) < 5 * beta * math.sqrt(2 / (M - 1))


def test_reverse_errors():
    x = _x0()
    with pytest.raises(ValueError, match="no noise"):
        reverse_step(SCHED, zero_predictor, DiffusionState(1, x), None, torch.ones_like(x))
    with pytest.raises(ValueError):
        reverse_step(SCHED, zero_predictor, DiffusionState(0, x), None)
    with pytest.raises(ValueError):
        reverse_step(SCHED, zero_predictor, DiffusionState(5, x), None, torch.zeros(1, 2, 3))


def test_state_rejects_nonfinite():
    with pytest.raises(NumericError):
        DiffusionState(3, torch.tensor([float("nan")]))


def _tiny_model(K=10):
    cfg = NetworkConfig(J=2, T=2, f=3, c=4, d_model=8, n_heads=2, n_spatial_layers=1,
                        n_temporal_layers=1, d_c=6, head_dims=(8, 4))
    model = build_model(cfg, seed=1)
    # perturb the zero-initialized output layer so the predictor is non-trivial
    with torch.no_grad():
        model.predictor.head3.weight.normal_(0, 0.1, generator=torch.Generator().manual_seed(0))
    return model, build_linear_schedule(K, 1e-4, 0.05)


def test_full_reverse_pass_untrained_is_finite():
    model, sched = _tiny_model()
    C = model.encode_past(torch.zeros(2, 2, 3))
    ps = sample(sched, model.predictor, C, N=4, seed=0, shape=(3, 2, 3), obs_id="o")
    assert ps.samples.shape == (4, 3, 2, 3)
    assert np.isfinite(ps.samples).all()
    assert ps.obs_id == "o"


def test_sample_deterministic_and_diverse():
    model, sched = _tiny_model()
    C = model.encode_past(torch.ones(2, 2, 3))
    a = sample(sched, model.predictor, C, N=2, seed=11, shape=(3, 2, 3))
    b = sample(sched, model.predictor, C, N=2, seed=11, shape=(3, 2, 3))
    c = sample(sched, model.predictor, C, N=2, seed=12, shape=(3, 2, 3))
    assert a.samples.tobytes() == b.samples.tobytes()
    assert not np.array_equal(a.samples, c.samples)
    assert apd(a) > 0


def test_chains_independent_of_N_and_batch():
    # chain n of condition b only depends on (seeds[b], n)
    model, sched = _tiny_model()
    C = model.encode_past(torch.randn(3, 2, 2, 3, dtype=torch.float64,
                                      generator=torch.Generator().manual_seed(3)))
    big, _ = sample_chains(sched, model.predictor, C, 5, [7, 8, 9], (3, 2, 3))
    small, _ = sample_chains(sched, model.predictor, C[1:2], 2, [8], (3, 2, 3))
    assert torch.allclose(big[1, :2], small[0], rtol=0, atol=1e-12)


def test_sample_chains_records_requested_steps():
    model, sched = _tiny_model()
    C = model.encode_past(torch.zeros(2, 2, 3))[None]
    out, kept = sample_chains(sched, model.predictor, C, 3, [0], (3, 2, 3), record=(10, 4, 0))
    assert sorted(kept) == [0, 4, 10]
    assert torch.equal(kept[0], out)
    assert kept[10].shape == out.shape


def test_sample_rejects_bad_N():
    model, sched = _tiny_model()
    with pytest.raises(ValueError):
        sample(sched, model.predictor, torch.zeros(6, dtype=torch.float64), 0, 0, (3, 2, 3))


def test_prediction_set_validation():
    with pytest.raises(ValueError):
        PredictionSet(np.zeros((0, 3, 2, 3)))
    with pytest.raises(ValueError):
        PredictionSet(np.zeros((3, 2, 3)))


def _kl_scalar(m, v):
    # KL(N(m, v) || N(0, 1)) for one coordinate
    return 0.5 * (v + m * m - 1 - math.log(v))


def test_prior_kl_matches_scalar_oracle():
    x0 = _x0(9)
    ab = SCHED.alpha_bar(100)
    expected = sum(_kl_scalar(math.sqrt(ab) * float(v), 1 - ab) for v in x0.reshape(-1))
    assert elbo_terms(SCHED, x0) == pytest.approx(expected, rel=1e-12)


def test_prior_kl_vanishes_when_distributions_coincide():
    x0 = torch.zeros(SHAPE, dtype=torch.float64)
    assert float(gaussian_kl_to_standard(x0, 1.0)) == 0.0
    # long schedule drives alpha_bar_K towards 0, so the KL goes to 0
    long = build_linear_schedule(2000, 1e-4, 0.05)
    assert elbo_terms(long, x0) < 1e-12
    assert elbo_terms(long, x0) <= elbo_terms(SCHED, x0)


@settings(max_examples=40, deadline=None)
@given(m=st.floats(-5, 5), v=st.floats(1e-3, 10))
def test_kl_nonnegative(m, v):
    assert float(gaussian_kl_to_standard(torch.tensor([m], dtype=torch.float64), v)) >= -1e-12
