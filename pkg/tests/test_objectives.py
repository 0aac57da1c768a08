"""Tests for the decoder objectives and their autoencoding reductions."""

import math

import numpy as np
import pytest
import torch

from vsmlab.core.diffcore import DTYPE
from vsmlab.core.gaussmodel import (
    LinearGaussToy,
    data_score_constant,
    exact_posterior_toy,
    sample_latents,
    toy_as_vae,
)
from vsmlab.core.gradcheck import central_difference
from vsmlab.core.objectives import (
    AutoencodingLosses,
    ObjectiveKind,
    autoenc_losses,
    closed_form_gamma,
    elbo_estimate,
    elbo_per_datum,
    elbo_reference,
    estimate_objective,
    gamma_optimal,
    joint_fd_estimate,
    joint_fd_per_datum,
    lk_per_datum,
    m1_estimate,
    m1_tilde_per_datum,
    m2_per_datum,
    m3_equivalence_gap,
    m3_per_datum,
    posterior_fd_estimate,
    tight_q_expansion,
    utility_h,
    UtilityKind,
)
from vsmlab.core.recovery import jfd_surface
from vsmlab.utils import make_generator


@pytest.fixture
def zero_decoder():
    """Affine toy with theta = 0, so g is identically zero, gamma = 1."""
    return toy_as_vae(LinearGaussToy(theta=0.0, gamma=1.0))


@pytest.fixture
def latents(small_model, small_batch):
    return sample_latents(small_model, small_batch, 6, make_generator(11))


def test_objective_direction():
    assert ObjectiveKind.ELBO.maximized
    assert not ObjectiveKind.M2.maximized


def test_score_objectives_at_perfect_reconstruction(zero_decoder):
    """Test that with g = x every score term vanishes and only -d_x/gamma is left."""
    x = torch.zeros((3, 1), dtype=DTYPE)
    z = torch.randn((4, 3, 1), generator=make_generator(2), dtype=DTYPE)
    for per_datum in (m1_tilde_per_datum, m2_per_datum, m3_per_datum):
        assert torch.allclose(per_datum(zero_decoder, x, z), torch.full((3,), -1.0, dtype=DTYPE))


def test_m1_rescales_autoencoding_loss(small_model, small_batch, latents):
    gamma = float(small_model.gamma)
    lhs = m1_tilde_per_datum(small_model, small_batch, latents.z)
    rhs = lk_per_datum(small_model, small_batch, latents.z) / (2 * gamma**2) - small_model.d_x / gamma
    assert torch.allclose(lhs, rhs, rtol=1e-10)


def test_m2_expansion(small_model, small_batch, latents):
    """Test M2 = (||x - mean g||^2 + 2 sum Var g) / (2 gamma^2) - d_x / gamma."""
    gamma = float(small_model.gamma)
    value = float(m2_per_datum(small_model, small_batch, latents.z).mean())
    losses = autoenc_losses(small_model, small_batch, latents)
    assert value == pytest.approx(losses.l_2_exact / (2 * gamma**2) - small_model.d_x / gamma, rel=1e-8)


def test_m3_expansion(small_model, small_batch, latents):
    gamma = float(small_model.gamma)
    value = float(m3_per_datum(small_model, small_batch, latents.z).mean().detach())
    losses = autoenc_losses(small_model, small_batch, latents)
    expected = losses.recon / (2 * gamma**2) - (losses.cross + small_model.d_x) / gamma
    assert value == pytest.approx(expected, rel=1e-8)


def test_elbo_matches_reference(small_model, small_batch, latents):
    estimate = elbo_estimate(small_model, small_batch, latents)
    assert estimate.value == pytest.approx(elbo_reference(small_model, small_batch, latents), rel=1e-10)
    direct = float(elbo_per_datum(small_model, small_batch, latents.z).mean())
    assert estimate.value == pytest.approx(direct, rel=1e-12)


@pytest.mark.parametrize("kind", [ObjectiveKind.ELBO, ObjectiveKind.M1, ObjectiveKind.M2, ObjectiveKind.M3])
def test_theta_gradient_matches_finite_difference(kind, small_model, small_batch, latents):
    """Test grad_theta against central differences with the latents held fixed."""
    estimate = estimate_objective(kind, small_model, small_batch, latents)
    fd = central_difference(
        lambda theta: estimate_objective(kind, small_model.with_theta(theta), small_batch, latents).value,
        small_model.theta_values,
    )
    assert torch.allclose(estimate.grad_theta, fd, rtol=1e-5, atol=1e-7)
    assert estimate.grad_encoder is None


def test_m1_xscore_term_only_changes_value(small_model, small_batch, latents):
    plain = m1_estimate(small_model, small_batch, latents)
    full = m1_estimate(small_model, small_batch, latents, include_xscore=True)
    assert full.value > plain.value
    assert torch.equal(plain.grad_theta, full.grad_theta)


def test_joint_fd_trains_both_networks(small_model, small_batch, latents):
    estimate = joint_fd_estimate(small_model, small_batch, latents)
    assert estimate.grad_encoder is not None
    assert estimate.grad_encoder.values.shape == small_model.encoder.values.shape
    assert float(estimate.grad_encoder.values.abs().sum()) > 0


@pytest.mark.parametrize(
    "toy",
    [
        exact_posterior_toy(2.0, gamma=0.5),
        LinearGaussToy(theta=2.0, gamma=0.5, phi=0.4, alpha=0.6),
        LinearGaussToy(theta=1.5, gamma=0.5, phi=0.1, alpha=0.6),
    ],
    ids=["exact", "narrow_q", "flat_q"],
)
def test_joint_fd_matches_closed_form_on_linear_toy(toy):
    """Test that the sampled joint FD plus the data constant equals the closed-form surface."""
    theta_star = 2.0
    v_pi = theta_star**2 + toy.gamma
    model = toy_as_vae(toy)
    x = math.sqrt(v_pi) * torch.randn((100_000, 1), generator=make_generator(31), dtype=DTYPE)
    latents = sample_latents(model, x, 1, make_generator(32))
    terms = joint_fd_per_datum(model, x, latents.z).detach() + data_score_constant(v_pi)
    se = float(terms.std()) / math.sqrt(terms.numel())
    expected = float(jfd_surface(toy.theta, toy.phi, theta_star, toy.alpha, toy.gamma))
    assert abs(float(terms.mean()) - expected) < 5 * se


def test_joint_fd_rejects_unreparametrized_latents(small_model, small_batch):
    latents = sample_latents(small_model, small_batch, 2, make_generator(0), reparametrized=False)
    with pytest.raises(ValueError):
        joint_fd_estimate(small_model, small_batch, latents)


def test_posterior_fd_vanishes_at_exact_posterior():
    """Test that a linear decoder with the exact Gaussian posterior gives zero posterior FD."""
    model = toy_as_vae(exact_posterior_toy(1.2, gamma=0.5))
    x = torch.linspace(-2.0, 2.0, 9, dtype=DTYPE).unsqueeze(-1)
    latents = sample_latents(model, x, 16, make_generator(4))
    assert posterior_fd_estimate(model, x, latents) == pytest.approx(0.0, abs=1e-16)


def test_posterior_fd_positive_off_posterior(small_model, small_batch, latents):
    assert posterior_fd_estimate(small_model, small_batch, latents) > 0


def test_autoenc_losses_with_zero_decoder(zero_decoder):
    x = torch.tensor([[1.0], [-2.0], [0.5]], dtype=DTYPE)
    latents = sample_latents(zero_decoder, x, 3, make_generator(8))
    losses = autoenc_losses(zero_decoder, x, latents)
    expected = float((x * x).sum(-1).mean())
    assert losses.l_k == pytest.approx(expected)
    assert losses.l_2 == pytest.approx(expected)
    assert losses.recon == pytest.approx(expected)


def test_utility_h():
    assert utility_h(UtilityKind.H_K, 3.0, 3) == pytest.approx(0.0)
    assert utility_h(UtilityKind.H_F, 1.0, 1) == pytest.approx(-0.5)
    with pytest.raises(ValueError):
        utility_h(UtilityKind.H_K, 0.0, 1)


@pytest.mark.parametrize("kind", list(UtilityKind))
def test_utility_h_is_increasing_and_concave(kind):
    ys = np.geomspace(1e-6, 1e6, 400)
    values = np.array([utility_h(kind, float(y), 2) for y in ys])
    assert np.all(np.diff(values) > 0)
    # Concavity on a log grid: slopes between neighbours shrink
    slopes = np.diff(values) / np.diff(ys)
    assert np.all(np.diff(slopes) < 0)


def test_gamma_optimal_examples():
    assert gamma_optimal(1.0, 1.0) == pytest.approx((1.0, -0.5))
    assert gamma_optimal(2.0, 2.0) == pytest.approx((1.0, -1.0))
    assert gamma_optimal(4.0, 2.0) == pytest.approx((2.0, -0.5))


def test_gamma_optimal_rejects_unattained_minimum():
    with pytest.raises(ValueError):
        gamma_optimal(1.0, 0.0)
    with pytest.raises(ValueError):
        gamma_optimal(-1.0, 1.0)


def test_closed_form_gamma(small_model, small_batch, latents):
    losses = autoenc_losses(small_model, small_batch, latents)
    assert closed_form_gamma(ObjectiveKind.ELBO, losses) == pytest.approx(losses.l_k / losses.d_x)
    assert closed_form_gamma(ObjectiveKind.M2, losses) == pytest.approx(losses.l_2_exact / losses.d_x)


def test_l3_value_is_m3_at_optimal_gamma():
    losses = AutoencodingLosses(l_k=1.0, l_2=1.0, l_2_exact=1.0, recon=2.0, cross=1.0, d_x=2)
    gamma = closed_form_gamma(ObjectiveKind.M3, losses)
    assert gamma == pytest.approx(2.0 / 3.0)
    assert losses.l3_value() == pytest.approx(2.0 / (2 * gamma**2) - 3.0 / gamma)
    assert losses.l3_value() == pytest.approx(-2.25)


def test_closed_form_gamma_skips_unattained(zero_decoder):
    x = torch.zeros((2, 1), dtype=DTYPE)
    latents = sample_latents(zero_decoder, x, 2, make_generator(0))
    losses = autoenc_losses(zero_decoder, x, latents)
    # recon is zero for x = g, so no optimum exists
    assert closed_form_gamma(ObjectiveKind.M3, losses) is None


def test_tight_q_expansion_at_optimal_precision():
    precision = torch.tensor([[2.0, 0.3], [0.3, 1.5]], dtype=DTYPE)
    assert tight_q_expansion([1.0, 2.0], precision, precision) == pytest.approx(5.0)
    assert tight_q_expansion([0.0, 0.0], precision, precision + torch.eye(2, dtype=DTYPE)) > 0


def test_m3_equivalence_gap_has_zero_mean(small_model):
    """Test that M3 plus the data constant matches the score-distance form on average."""
    variance = 1.7
    x = math.sqrt(variance) * torch.randn((4000, 2), generator=make_generator(21), dtype=DTYPE)
    latents = sample_latents(small_model, x, 4, make_generator(22))
    gap = m3_equivalence_gap(
        small_model, x, latents, data_score=lambda v: -v / variance, c_pi=2 / (2 * variance)
    )
    mean = float(gap.mean())
    se = float(gap.std()) / math.sqrt(gap.numel())
    assert abs(mean) < 5 * se
