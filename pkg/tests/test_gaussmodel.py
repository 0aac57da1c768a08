"""Tests for the Gaussian VAE densities, scores and closed-form divergences."""

import math

import numpy as np
import pytest
import torch
from scipy import stats

from vsmlab.core.diffcore import DTYPE
from vsmlab.core.gaussmodel import (
    GaussianVae,
    LinearGaussToy,
    data_score_constant,
    encode,
    encoder_scores,
    exact_posterior_toy,
    gaussian_fd_closed,
    gaussian_fd_full,
    gaussian_kld_closed,
    gaussian_kld_full,
    kl_to_prior,
    likelihood_score_divergence,
    likelihood_score_x,
    log_likelihood,
    log_prior,
    log_q,
    optimal_precision,
    sample_latents,
    toy_as_vae,
    toy_joint_gaussians,
)
from vsmlab.utils import make_generator


def test_model_dimensions(small_model):
    assert small_model.d_x == 2
    assert small_model.d_z == 2
    assert small_model.gamma.item() == pytest.approx(math.exp(-0.3))
    assert small_model.theta_values.numel() == small_model.decoder.spec.n_params + 1


def test_with_theta_roundtrip(small_model):
    """Test that splitting theta back into decoder and log gamma is lossless."""
    rebuilt = small_model.with_theta(small_model.theta_values)
    assert torch.equal(rebuilt.decoder.values, small_model.decoder.values)
    assert torch.equal(rebuilt.log_gamma, small_model.log_gamma)


def test_encoder_shape_mismatch_rejected(small_model):
    other = GaussianVae.initialize(3, 2, [4], "relu", make_generator(0))
    with pytest.raises(ValueError):
        GaussianVae(small_model.decoder, small_model.log_gamma, other.encoder)


def test_log_prior_matches_scipy():
    z = torch.tensor([[0.3, -1.2], [2.0, 0.1]], dtype=DTYPE)
    expected = stats.multivariate_normal(mean=np.zeros(2)).logpdf(z.numpy())
    assert np.allclose(log_prior(z).numpy(), expected)


def test_log_likelihood_matches_scipy():
    """Test log N(x; theta z, gamma) on the affine toy."""
    toy = LinearGaussToy(theta=1.3, gamma=0.4)
    model = toy_as_vae(toy)
    x = torch.tensor([0.7], dtype=DTYPE)
    z = torch.tensor([[0.2], [-1.0]], dtype=DTYPE)
    expected = stats.norm(loc=1.3 * z.numpy()[:, 0], scale=math.sqrt(0.4)).logpdf(0.7)
    assert np.allclose(log_likelihood(model, x, z).detach().numpy(), expected)


def test_log_q_and_kl_to_prior():
    mu = torch.tensor([0.5, -0.2], dtype=DTYPE)
    log_sigma = torch.tensor([-0.1, 0.3], dtype=DTYPE)
    z = torch.tensor([0.0, 1.0], dtype=DTYPE)
    expected = stats.norm(mu.numpy(), np.exp(log_sigma.numpy())).logpdf(z.numpy()).sum()
    assert log_q(mu, log_sigma, z).item() == pytest.approx(expected)
    kl = gaussian_kld_closed(mu.numpy(), np.exp(log_sigma.numpy()), np.zeros(2), np.ones(2))
    assert kl_to_prior(mu, log_sigma).item() == pytest.approx(kl)


def test_likelihood_score_divergence(small_model, small_batch):
    """Test that the x-divergence of the likelihood score is -d_x / gamma."""
    x = small_batch[0].clone().requires_grad_(True)
    z = torch.tensor([0.2, -0.4], dtype=DTYPE)
    score = likelihood_score_x(small_model, x, z)
    trace = sum(torch.autograd.grad(score[i], x, retain_graph=True)[0][i] for i in range(2))
    assert trace.item() == pytest.approx(likelihood_score_divergence(small_model).item())


def test_encoder_scores_match_finite_difference(small_model, small_batch):
    x = small_batch[0]
    z = torch.tensor([[0.1, 0.2], [-0.5, 0.3]], dtype=DTYPE)
    score_z, score_x = encoder_scores(small_model, x, z)
    assert score_z.shape == (2, 2)
    assert score_x.shape == (2, 2)

    def logq_at(xv):
        mu, log_sigma = encode(small_model, xv)
        return log_q(mu, log_sigma, z).detach()

    h = 1e-6
    for j in range(2):
        bump = torch.zeros(2, dtype=DTYPE)
        bump[j] = h
        fd = (logq_at(x + bump) - logq_at(x - bump)) / (2 * h)
        assert torch.allclose(score_x[:, j], fd, atol=1e-6)


def test_encoder_scores_dimension_check(small_model):
    with pytest.raises(ValueError):
        encoder_scores(small_model, torch.zeros(3, dtype=DTYPE), torch.zeros(2, dtype=DTYPE))


def test_sample_latents_shapes_and_determinism(small_model, small_batch):
    a = sample_latents(small_model, small_batch, 4, make_generator(5))
    b = sample_latents(small_model, small_batch, 4, make_generator(5))
    assert a.z.shape == (4, 12, 2)
    assert a.n_samples == 4
    assert torch.equal(a.z, b.z)
    mu, log_sigma = encode(small_model, small_batch)
    assert torch.allclose(a.z, mu + torch.exp(log_sigma) * a.eps)


def test_sample_latents_rejects_zero_samples(small_model, small_batch):
    with pytest.raises(ValueError):
        sample_latents(small_model, small_batch, 0, make_generator(0))


def test_fd_closed_is_zero_at_equality_and_positive_otherwise():
    assert gaussian_fd_closed(0.3, 1.2, 0.3, 1.2) == pytest.approx(0.0, abs=1e-14)
    assert gaussian_fd_closed(0.0, 1.0, 1.0, 2.0) > 0


def test_fd_closed_known_value():
    """Test 1/s1^2 - 2/s2^2 + (s1^2 + d^2)/s2^4 at a hand-computed point."""
    assert gaussian_fd_closed(1.0, 1.0, 0.0, 2.0) == pytest.approx(1.0 - 0.5 + 2.0 / 16.0)


def test_kld_closed_known_values():
    assert gaussian_kld_closed(0.0, 1.0, 1.0, 1.0) == pytest.approx(0.5)
    # log(1/2) + 4/2 - 1/2
    assert gaussian_kld_closed(0.0, 2.0, 0.0, 1.0) == pytest.approx(0.80685, abs=1e-5)
    assert gaussian_kld_closed([0.0, 0.0], [1.0, 2.0], [1.0, 0.0], [1.0, 1.0]) == pytest.approx(1.30685, abs=1e-5)


def test_fd_full_matches_monte_carlo():
    """Test the full-covariance FD against (1/2) E_p1 ||grad log p1 - grad log p2||^2 by sampling."""
    m1, S1 = np.array([0.3, -0.2]), np.array([[1.2, 0.4], [0.4, 0.8]])
    m2, S2 = np.array([-0.5, 0.4]), np.array([[0.9, -0.3], [-0.3, 1.5]])
    y = np.random.default_rng(7).multivariate_normal(m1, S1, size=200_000)
    mismatch = -(y - m1) @ np.linalg.inv(S1) + (y - m2) @ np.linalg.inv(S2)
    terms = 0.5 * (mismatch * mismatch).sum(-1)
    se = terms.std(ddof=1) / math.sqrt(len(terms))
    assert abs(terms.mean() - gaussian_fd_full(m1, S1, m2, S2)) < 4 * se


def test_full_forms_agree_with_diagonal():
    m1, s1 = np.array([0.2, -0.4]), np.array([0.9, 1.4])
    m2, s2 = np.array([-0.3, 0.5]), np.array([1.1, 0.7])
    S1, S2 = np.diag(s1**2), np.diag(s2**2)
    assert gaussian_kld_full(m1, S1, m2, S2) == pytest.approx(gaussian_kld_closed(m1, s1, m2, s2))
    assert gaussian_fd_full(m1, S1, m2, S2) == pytest.approx(0.5 * gaussian_fd_closed(m1, s1, m2, s2))


def test_closed_forms_reject_bad_inputs():
    with pytest.raises(ValueError):
        gaussian_kld_closed(0.0, -1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        gaussian_fd_full([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]], [0.0, 0.0], np.eye(2))


def test_data_score_constant():
    assert data_score_constant(2.0, 3) == pytest.approx(0.75)


def test_optimal_precision_on_affine_toy():
    """Test that Lambda* = 1 + theta^2 / gamma for the linear decoder."""
    model = toy_as_vae(LinearGaussToy(theta=2.0, gamma=0.5))
    precision = optimal_precision(model, torch.tensor([0.3], dtype=DTYPE))
    assert precision.item() == pytest.approx(1.0 + 4.0 / 0.5)


def test_exact_posterior_toy():
    toy = exact_posterior_toy(1.5, gamma=0.5)
    assert toy.phi == pytest.approx(1.5 / (2.25 + 0.5))
    assert toy.q_variance == pytest.approx(toy.v_star)
    assert toy.marginal_variance == pytest.approx(2.75)


def test_toy_joints_match_at_exact_posterior():
    """Test that data and model joints coincide when theta = theta* and q is exact."""
    toy = exact_posterior_toy(0.8, gamma=0.5)
    data, model = toy_joint_gaussians(toy, 0.8)
    assert np.allclose(data.cov, model.cov)


def test_toy_rejects_non_positive_gamma():
    with pytest.raises(ValueError):
        LinearGaussToy(theta=1.0, gamma=0.0)
