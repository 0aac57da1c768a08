"""
Gaussian VAE densities, scores and samplers.

Model: p(z) = N(0, I), p(x|z) = N(g(z), gamma I), q(z|x) = N(mu(x), diag sigma(x)^2).
Latent tensors carry a leading sample axis: z has shape (S, ..., d_z) while x
has shape (..., d_x); every density and score broadcasts x over the samples.

Also holds the closed-form Gaussian divergences and the scalar
linear-Gaussian recovery toy, with its exact joint Gaussians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from ..errors import DivergenceError
from ..logging import get_logger
from .diffcore import (
    DTYPE,
    Activation,
    MlpSpec,
    ParamVector,
    concat_values,
    mlp_jacobian,
    network_forward,
)

logger = get_logger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


# ============================================================================
# 1. Model Types
# ============================================================================

@dataclass(frozen=True, eq=False)
class GaussianVae:
    """
    Decoder g: R^d_z -> R^d_x with likelihood variance gamma, plus a diagonal
    Gaussian encoder x -> (mu, log sigma).

    gamma is stored as log_gamma so it stays positive under any update.
    """
    decoder: ParamVector
    log_gamma: torch.Tensor
    encoder: ParamVector

    def __post_init__(self):
        log_gamma = torch.as_tensor(self.log_gamma, dtype=DTYPE).reshape(())
        object.__setattr__(self, "log_gamma", log_gamma)
        if not bool(torch.isfinite(log_gamma)):
            raise DivergenceError("log_gamma")
        d_z = self.decoder.spec.input_dim
        d_x = self.decoder.spec.output_dim
        if self.encoder.spec.output_dim != 2 * d_z:
            raise ValueError(
                f"Encoder output dim {self.encoder.spec.output_dim} must be 2 * d_z = {2 * d_z}"
            )
        if self.encoder.spec.input_dim != d_x:
            raise ValueError(f"Encoder input dim {self.encoder.spec.input_dim} must equal d_x = {d_x}")

    @property
    def d_z(self) -> int:
        return self.decoder.spec.input_dim

    @property
    def d_x(self) -> int:
        return self.decoder.spec.output_dim

    @property
    def gamma(self) -> torch.Tensor:
        return torch.exp(self.log_gamma)

    @property
    def theta_values(self) -> torch.Tensor:
        """Decoder parameters followed by log gamma, as one flat vector."""
        return concat_values([self.decoder.values, self.log_gamma])

    @classmethod
    def initialize(
        cls,
        d_x: int,
        d_z: int,
        hidden: Sequence[int],
        activation: Activation,
        generator: torch.Generator,
        log_gamma: float = 0.0,
    ) -> GaussianVae:
        """Fresh model with Glorot-uniform weights in both networks."""
        dec_spec = MlpSpec((d_z, *hidden, d_x), activation)
        enc_spec = MlpSpec((d_x, *hidden, 2 * d_z), activation)
        decoder = ParamVector.initialize(dec_spec, generator)
        encoder = ParamVector.initialize(enc_spec, generator)
        return cls(decoder, torch.tensor(log_gamma, dtype=DTYPE), encoder)

    def with_theta(self, theta_values: torch.Tensor) -> GaussianVae:
        """Replace decoder params and log gamma from a flat theta vector."""
        n = self.decoder.spec.n_params
        return GaussianVae(self.decoder.with_values(theta_values[:n]), theta_values[n], self.encoder)

    def with_encoder(self, values: torch.Tensor) -> GaussianVae:
        return GaussianVae(self.decoder, self.log_gamma, self.encoder.with_values(values))

    def requiring_grad(self, theta: bool = True, phi: bool = True) -> GaussianVae:
        """Copy whose selected parameters are fresh autograd leaves."""
        dec = self.decoder.values.detach().clone().requires_grad_(theta)
        log_gamma = self.log_gamma.detach().clone().requires_grad_(theta)
        enc = self.encoder.values.detach().clone().requires_grad_(phi)
        return GaussianVae(self.decoder.with_values(dec), log_gamma, self.encoder.with_values(enc))

    def detached(self) -> GaussianVae:
        return GaussianVae(
            self.decoder.detached(), self.log_gamma.detach().clone(), self.encoder.detached()
        )


@dataclass(frozen=True, eq=False)
class LatentBatch:
    """
    S latent samples per datum with the noise that produced them.

    z = mu + sigma * eps. When ``reparametrized`` is False, estimators treat z
    as fixed points and never differentiate through the sampling path.
    """
    z: torch.Tensor
    eps: torch.Tensor
    reparametrized: bool = True

    @property
    def n_samples(self) -> int:
        return int(self.z.shape[0])


# ============================================================================
# 2. Densities and Scores
# ============================================================================

def decode(model: GaussianVae, z: torch.Tensor) -> torch.Tensor:
    return network_forward(model.decoder.spec, model.decoder.values, z)


def encode(model: GaussianVae, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (mu, log_sigma), each with trailing dim d_z."""
    out = network_forward(model.encoder.spec, model.encoder.values, x)
    return out[..., : model.d_z], out[..., model.d_z:]


def _check_x(model: GaussianVae, x: torch.Tensor) -> None:
    if x.dim() == 0 or x.shape[-1] != model.d_x:
        raise ValueError(f"x has trailing dimension {tuple(x.shape)}, expected d_x={model.d_x}")


def _check_z(model: GaussianVae, z: torch.Tensor) -> None:
    if z.dim() == 0 or z.shape[-1] != model.d_z:
        raise ValueError(f"z has trailing dimension {tuple(z.shape)}, expected d_z={model.d_z}")


def log_prior(z: torch.Tensor) -> torch.Tensor:
    d = z.shape[-1]
    return -0.5 * (z * z).sum(-1) - 0.5 * d * LOG_2PI


def log_likelihood(model: GaussianVae, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """log N(x; g(z), gamma I) for every sample in z."""
    residual = x - decode(model, z)
    return (
        -0.5 * (residual * residual).sum(-1) / model.gamma
        - 0.5 * model.d_x * (LOG_2PI + model.log_gamma)
    )


def log_q(mu: torch.Tensor, log_sigma: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Diagonal Gaussian log-density summed over the last axis."""
    scaled = (z - mu) * torch.exp(-log_sigma)
    return (-0.5 * scaled * scaled - log_sigma - 0.5 * LOG_2PI).sum(-1)


def kl_to_prior(mu: torch.Tensor, log_sigma: torch.Tensor) -> torch.Tensor:
    """KL[N(mu, sigma^2) || N(0, I)] in closed form, summed over the last axis."""
    return 0.5 * (mu * mu + torch.exp(2.0 * log_sigma) - 1.0 - 2.0 * log_sigma).sum(-1)


def likelihood_score_x(model: GaussianVae, x, z) -> torch.Tensor:
    """
    Score of the likelihood in x: -(x - g(z)) / gamma.

    Its divergence in x is the constant -d_x / gamma.

    Raises:
        ValueError: On dimension mismatch
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    z = torch.as_tensor(z, dtype=DTYPE)
    _check_x(model, x)
    _check_z(model, z)
    return -(x - decode(model, z)) / model.gamma


def likelihood_score_divergence(model: GaussianVae) -> torch.Tensor:
    """Exact divergence of likelihood_score_x in x."""
    return -model.d_x / model.gamma


def encoder_scores(model: GaussianVae, x, z) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Scores of q(z|x) in z and in x.

    score_z = -(z - mu(x)) / sigma(x)^2. score_x is the x-gradient of log q(z|x)
    with z held fixed, taken by reverse mode through mu and log sigma. Each
    sample gets its own copy of x so per-sample gradients stay separate.

    Returns:
        (score_z with z's shape, score_x with shape z.shape[:-1] + (d_x,))

    Raises:
        ValueError: On dimension mismatch
        DivergenceError: If sigma(x) is not finite and positive
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    z = torch.as_tensor(z, dtype=DTYPE)
    _check_x(model, x)
    _check_z(model, z)

    track = bool(model.encoder.values.requires_grad or z.requires_grad)
    x_rep = x.detach().expand(*z.shape[:-1], model.d_x).clone().requires_grad_(True)
    with torch.enable_grad():
        mu, log_sigma = encode(model, x_rep)
        if not bool(torch.isfinite(log_sigma).all()):
            raise DivergenceError("encoder sigma")
        logq = log_q(mu, log_sigma, z).sum()
        (score_x,) = torch.autograd.grad(logq, x_rep, create_graph=track)
    score_z = -(z - mu) * torch.exp(-2.0 * log_sigma)
    if not track:
        return score_z.detach(), score_x.detach()
    return score_z, score_x


def sample_latents(
    model: GaussianVae,
    x,
    n_samples: int,
    generator: torch.Generator,
    reparametrized: bool = True,
) -> LatentBatch:
    """
    Draw S samples z = mu(x) + sigma(x) * eps for every datum in x.

    The returned z is detached from the encoder; estimators that need
    encoder gradients rebuild it from eps with latent_z.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    x = torch.as_tensor(x, dtype=DTYPE)
    _check_x(model, x)
    eps = torch.randn((n_samples, *x.shape[:-1], model.d_z), generator=generator, dtype=DTYPE)
    with torch.no_grad():
        mu, log_sigma = encode(model, x)
        z = mu + torch.exp(log_sigma) * eps
    return LatentBatch(z, eps, reparametrized)


def latent_z(model: GaussianVae, x: torch.Tensor, latents: LatentBatch, track_encoder: bool):
    """Latent samples, rebuilt through the encoder when reparametrized gradients are needed."""
    if track_encoder and latents.reparametrized:
        mu, log_sigma = encode(model, x)
        return mu + torch.exp(log_sigma) * latents.eps
    return latents.z


# ============================================================================
# 3. Closed-form Gaussian Divergences
# ============================================================================

def _positive(name: str, value: np.ndarray) -> np.ndarray:
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)) or np.any(value <= 0):
        raise ValueError(f"{name} must be positive and finite, got {value}")
    return value


def gaussian_kld_closed(m1, s1, m2, s2) -> float:
    """
    KL[N(m1, s1^2) || N(m2, s2^2)] for diagonal Gaussians (s are standard deviations).

    Univariate: log(s2/s1) + (s1^2 + (m1-m2)^2) / (2 s2^2) - 1/2, summed over coordinates.

    Raises:
        ValueError: On a non-positive standard deviation
    """
    s1 = _positive("s1", s1)
    s2 = _positive("s2", s2)
    diff = np.asarray(m1, dtype=np.float64) - np.asarray(m2, dtype=np.float64)
    terms = np.log(s2 / s1) + (s1**2 + diff**2) / (2.0 * s2**2) - 0.5
    return float(np.sum(terms))


def gaussian_fd_closed(m1, s1, m2, s2) -> float:
    """
    Fisher divergence E_p1 (d/dy log p1 - d/dy log p2)^2 between diagonal Gaussians.

    Univariate: 1/s1^2 - 2/s2^2 + (s1^2 + (m1-m2)^2) / s2^4, summed over
    coordinates. This form carries no 1/2 factor; gaussian_fd_full does.

    Raises:
        ValueError: On a non-positive standard deviation
    """
    s1 = _positive("s1", s1)
    s2 = _positive("s2", s2)
    diff = np.asarray(m1, dtype=np.float64) - np.asarray(m2, dtype=np.float64)
    terms = 1.0 / s1**2 - 2.0 / s2**2 + (s1**2 + diff**2) / s2**4
    return float(np.sum(terms))


def _spd(name: str, cov) -> np.ndarray:
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    if cov.shape[0] != cov.shape[1]:
        raise ValueError(f"{name} must be square, got shape {cov.shape}")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} is singular or not positive definite") from None
    return cov


def gaussian_kld_full(m1, S1, m2, S2) -> float:
    """KL[N(m1, S1) || N(m2, S2)] for full covariances."""
    S1 = _spd("S1", S1)
    S2 = _spd("S2", S2)
    diff = np.atleast_1d(np.asarray(m1, dtype=np.float64) - np.asarray(m2, dtype=np.float64))
    S2_inv = np.linalg.inv(S2)
    _, logdet1 = np.linalg.slogdet(S1)
    _, logdet2 = np.linalg.slogdet(S2)
    k = S1.shape[0]
    return float(
        0.5 * (np.trace(S2_inv @ S1) + diff @ S2_inv @ diff - k + logdet2 - logdet1)
    )


def gaussian_fd_full(m1, S1, m2, S2) -> float:
    """
    Fisher divergence (1/2) E_p1 ||grad log p1 - grad log p2||^2 for full covariances.

    Equals (1/2)[Tr(A S1 A^T) + (m1-m2)^T S2^-2 (m1-m2)] with A = S1^-1 - S2^-1.
    On diagonal inputs it is half of gaussian_fd_closed.
    """
    S1 = _spd("S1", S1)
    S2 = _spd("S2", S2)
    diff = np.atleast_1d(np.asarray(m1, dtype=np.float64) - np.asarray(m2, dtype=np.float64))
    S1_inv = np.linalg.inv(S1)
    S2_inv = np.linalg.inv(S2)
    A = S1_inv - S2_inv
    shifted = S2_inv @ diff
    return float(0.5 * (np.trace(A @ S1 @ A.T) + shifted @ shifted))


def data_score_constant(variance: float, dim: int = 1) -> float:
    """C = (1/2) E_pi ||grad log pi||^2 for pi = N(0, variance I): dim / (2 variance)."""
    variance = float(_positive("variance", variance))
    return dim / (2.0 * variance)


def optimal_precision(model: GaussianVae, z) -> torch.Tensor:
    """Lambda* = I + (1/gamma) J^T J with J the decoder Jacobian at z (built by jvp)."""
    z = torch.as_tensor(z, dtype=DTYPE)
    J = mlp_jacobian(model.decoder.spec, model.decoder.detached(), z)
    gamma = model.gamma.detach()
    return torch.eye(model.d_z, dtype=DTYPE) + J.T @ J / gamma


# ============================================================================
# 4. Linear-Gaussian Recovery Toy
# ============================================================================

@dataclass(frozen=True)
class JointGaussian:
    """A 2D Gaussian over (z, x)."""
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class LinearGaussToy:
    """
    Scalar model p(z) = N(0,1), p(x|z) = N(theta z, gamma) with encoder
    q(z|x) = N(phi x, alpha v*), where v* = (1 + theta^2/gamma)^-1 is the exact
    posterior variance of the model.
    """
    theta: float
    gamma: float = 0.5
    phi: float = 0.0
    alpha: float = 1.0

    def __post_init__(self):
        for name in ("theta", "gamma", "phi", "alpha"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    @property
    def v_star(self) -> float:
        return 1.0 / (1.0 + self.theta**2 / self.gamma)

    @property
    def q_variance(self) -> float:
        return self.alpha * self.v_star

    @property
    def exact_slope(self) -> float:
        """Slope of the exact posterior mean, E[z|x] = slope * x."""
        return self.theta / (self.theta**2 + self.gamma)

    @property
    def marginal_variance(self) -> float:
        return self.theta**2 + self.gamma


def toy_joint_gaussians(toy: LinearGaussToy, theta_star: float) -> tuple[JointGaussian, JointGaussian]:
    """
    Exact joints over (z, x).

    Data side: x ~ pi = N(0, theta*^2 + gamma), z | x ~ q = N(phi x, alpha v*).
    Model side: z ~ N(0, 1), x | z ~ N(theta z, gamma).
    """
    v_pi = theta_star**2 + toy.gamma
    phi = toy.phi
    data_cov = np.array(
        [[phi**2 * v_pi + toy.q_variance, phi * v_pi], [phi * v_pi, v_pi]], dtype=np.float64
    )
    model_cov = np.array(
        [[1.0, toy.theta], [toy.theta, toy.theta**2 + toy.gamma]], dtype=np.float64
    )
    zero = np.zeros(2, dtype=np.float64)
    return JointGaussian(zero, data_cov), JointGaussian(zero.copy(), model_cov)


def toy_as_vae(toy: LinearGaussToy) -> GaussianVae:
    """The toy written as a GaussianVae with single-layer (affine) networks."""
    decoder = ParamVector(MlpSpec((1, 1)), torch.tensor([toy.theta, 0.0], dtype=DTYPE))
    # Encoder weight row [phi, 0], bias [0, log sd]
    log_sd = 0.5 * math.log(toy.q_variance)
    encoder = ParamVector(MlpSpec((1, 2)), torch.tensor([toy.phi, 0.0, 0.0, log_sd], dtype=DTYPE))
    return GaussianVae(decoder, torch.tensor(math.log(toy.gamma), dtype=DTYPE), encoder)


def exact_posterior_toy(theta: float, gamma: float = 0.5, alpha: Optional[float] = None) -> LinearGaussToy:
    """Toy whose encoder is the exact posterior (or alpha-scaled variance of it)."""
    toy = LinearGaussToy(theta=theta, gamma=gamma, alpha=1.0 if alpha is None else alpha)
    return LinearGaussToy(theta=theta, gamma=gamma, phi=toy.exact_slope, alpha=toy.alpha)
