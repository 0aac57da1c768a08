"""Tests for closed-form parameter recovery on the linear-Gaussian toy."""

import numpy as np
import pytest

from vsmlab.core.gaussmodel import exact_posterior_toy, gaussian_fd_full, gaussian_kld_full, LinearGaussToy, toy_joint_gaussians
from vsmlab.core.recovery import (
    RECOVERY_COLUMNS,
    RecoveryMethod,
    grid_minimum,
    jfd_surface,
    jkld_surface,
    recover_theta,
    recovery_table,
    theta_extent,
)


@pytest.mark.parametrize("theta, phi", [(1.5, 0.3), (-0.7, -1.1), (0.2, 0.9)])
def test_surfaces_match_full_covariance_forms(theta, phi):
    """Test the vectorized 2x2 surfaces against the general Gaussian divergences."""
    theta_star, alpha, gamma = 1.2, 0.6, 0.5
    toy = LinearGaussToy(theta=theta, gamma=gamma, phi=phi, alpha=alpha)
    data, model = toy_joint_gaussians(toy, theta_star)
    kl = gaussian_kld_full(data.mean, data.cov, model.mean, model.cov)
    fd = gaussian_fd_full(data.mean, data.cov, model.mean, model.cov)
    assert float(jkld_surface(theta, phi, theta_star, alpha, gamma)) == pytest.approx(kl, rel=1e-10)
    assert float(jfd_surface(theta, phi, theta_star, alpha, gamma)) == pytest.approx(fd, rel=1e-10)


def test_surfaces_vanish_at_exact_posterior():
    toy = exact_posterior_toy(1.5, gamma=0.5)
    for surface in (jkld_surface, jfd_surface):
        assert float(surface(1.5, toy.phi, 1.5, 1.0, 0.5)) == pytest.approx(0.0, abs=1e-12)


def test_surfaces_are_sign_symmetric():
    a = jfd_surface(0.8, 0.4, 1.0, 0.6, 0.5)
    b = jfd_surface(-0.8, -0.4, 1.0, 0.6, 0.5)
    assert float(a) == pytest.approx(float(b))


def test_surfaces_vectorize():
    thetas, phis = np.meshgrid(np.linspace(-1, 1, 4), np.linspace(-1, 1, 5), indexing="ij")
    assert jkld_surface(thetas, phis, 1.0, 0.6, 0.5).shape == (4, 5)


def test_theta_extent():
    assert theta_extent(0.5) == 3.0
    assert theta_extent(2.5) == pytest.approx(4.75)


def test_grid_minimum_near_truth():
    theta, phi, value = grid_minimum(RecoveryMethod.JKLD, 1.0, 1.0, 0.5, points=101)
    assert abs(abs(theta) - 1.0) <= 0.06
    assert value >= -1e-12


@pytest.mark.parametrize("method", list(RecoveryMethod))
@pytest.mark.parametrize("theta_star", [-2.0, 0.7, 1.5])
def test_exact_family_recovers_theta_star(method, theta_star):
    row = recover_theta(theta_star, method, alpha=1.0, gamma=0.5, n_starts=2, grid_points=101)
    assert abs(row.bias) < 1e-3
    assert row.theta_hat * theta_star >= 0


def test_recovery_table_order_and_rows():
    rows = recovery_table([0.5, 1.0], alpha=0.6, gamma=0.5, n_starts=1, grid_points=51)
    assert [(r.theta_star, r.method) for r in rows] == [
        (0.5, RecoveryMethod.JKLD), (0.5, RecoveryMethod.JFD),
        (1.0, RecoveryMethod.JKLD), (1.0, RecoveryMethod.JFD),
    ]
    assert all(len(r.csv_row()) == len(RECOVERY_COLUMNS) for r in rows)
    assert all(r.bias == pytest.approx(r.theta_hat - r.theta_star) for r in rows)


@pytest.mark.slow
def test_misspecified_encoder_biases_joint_fd_more():
    jkld = recover_theta(2.0, RecoveryMethod.JKLD, alpha=0.6, gamma=0.5)
    jfd = recover_theta(2.0, RecoveryMethod.JFD, alpha=0.6, gamma=0.5)
    assert jfd.converged and jkld.converged
    assert abs(jfd.bias) >= 5 * abs(jkld.bias)
