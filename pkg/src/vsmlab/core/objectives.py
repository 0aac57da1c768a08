"""
Learning objectives for Gaussian VAEs and their autoencoding reductions.

Each objective has a per-datum function on raw tensors (differentiable in the
model parameters) and a public *_estimate wrapper that averages over the data
batch and returns an ObjectiveEstimate with reverse-mode gradients.

Scores:
    s_p(x|z) = -(x - g(z)) / gamma       likelihood score in x
    s_q(z|x) = grad_x log q(z|x)         encoder score in x
The divergence of s_p in x is always folded in as the constant -d_x / gamma.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import torch

from ..errors import DivergenceError
from ..logging import get_logger
from .diffcore import DTYPE, ParamVector
from .gaussmodel import (
    LOG_2PI,
    GaussianVae,
    LatentBatch,
    decode,
    encode,
    encoder_scores,
    kl_to_prior,
    latent_z,
    log_likelihood,
)

logger = get_logger(__name__)


class ObjectiveKind(str, Enum):
    """Decoder objectives. ELBO is maximized, every other kind is minimized."""
    ELBO = "elbo"
    M1 = "m1"
    M2 = "m2"
    M3 = "m3"
    JOINT_FD = "joint_fd"

    @property
    def maximized(self) -> bool:
        return self is ObjectiveKind.ELBO


@dataclass(frozen=True, eq=False)
class ObjectiveEstimate:
    """
    Batch-mean value of an objective plus its gradients.

    grad_decoder and grad_log_gamma form grad_theta. grad_encoder is only
    filled by objectives that train the encoder too (joint FD).
    """
    value: float
    grad_decoder: ParamVector
    grad_log_gamma: float
    samples_used: LatentBatch
    grad_encoder: Optional[ParamVector] = None

    @property
    def grad_theta(self) -> torch.Tensor:
        return torch.cat(
            [self.grad_decoder.values, torch.tensor([self.grad_log_gamma], dtype=DTYPE)]
        )


# ============================================================================
# 1. Per-datum objective values (differentiable)
# ============================================================================

def _scores_p(model: GaussianVae, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    return -(x - decode(model, z)) / model.gamma


def elbo_per_datum(model: GaussianVae, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    mu, log_sigma = encode(model, x)
    return log_likelihood(model, x, z).mean(0) - kl_to_prior(mu, log_sigma)


def m1_tilde_per_datum(model: GaussianVae, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    s_p = _scores_p(model, x, z)
    return 0.5 * (s_p * s_p).sum(-1).mean(0) - model.d_x / model.gamma


def lk_per_datum(model: GaussianVae, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """mean_s ||x - g(z_s)||^2, the autoencoding loss that theta-only M1 rescales."""
    residual = x - decode(model, z)
    return (residual * residual).sum(-1).mean(0)


def xscore_term_per_datum(model: GaussianVae, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """(1/2) mean_s ||s_q(z_s|x)||^2, the theta-free part of M1."""
    _, score_x = encoder_scores(model, x, z)
    return 0.5 * (score_x * score_x).sum(-1).mean(0)


def m2_per_datum(model: GaussianVae, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    s_p = _scores_p(model, x, z)
    mean_s = s_p.mean(0)
    return (
        (s_p * s_p).sum(-1).mean(0)
        - model.d_x / model.gamma
        - 0.5 * (mean_s * mean_s).sum(-1)
    )


def m3_per_datum(model: GaussianVae, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    s_p = _scores_p(model, x, z)
    _, score_x = encoder_scores(model, x, z)
    mean_s = s_p.mean(0)
    return (
        (score_x * s_p).sum(-1).mean(0)
        - model.d_x / model.gamma
        + 0.5 * (mean_s * mean_s).sum(-1)
    )


def posterior_fd_per_datum(model: GaussianVae, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """
    (1/2) mean_s ||score_z_q(z_s) + z_s - J_g(z_s)^T (x - g(z_s)) / gamma||^2.

    J^T r comes from one reverse-mode pass through the decoder with the graph
    kept, so the result can itself be differentiated.
    """
    if not z.requires_grad:
        z = z.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        g = decode(model, z)
        residual = (x - g) / model.gamma
        (jt_residual,) = torch.autograd.grad(g, z, grad_outputs=residual, create_graph=True)
        mu, log_sigma = encode(model, x)
        score_zq = -(z - mu) * torch.exp(-2.0 * log_sigma)
        mismatch = score_zq + z - jt_residual
        return 0.5 * (mismatch * mismatch).sum(-1).mean(0)


# ============================================================================
# 2. Estimators
# ============================================================================

def prepare_x(model: GaussianVae, x) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.dim() == 0 or x.shape[-1] != model.d_x:
        raise ValueError(f"x has trailing dimension {tuple(x.shape)}, expected d_x={model.d_x}")
    return x


def _estimate(
    model: GaussianVae,
    x,
    latents: LatentBatch,
    per_datum: Callable[[GaussianVae, torch.Tensor, torch.Tensor], torch.Tensor],
    train_encoder: bool = False,
    report_extra: Optional[Callable[[GaussianVae, torch.Tensor, torch.Tensor], torch.Tensor]] = None,
) -> ObjectiveEstimate:
    x = prepare_x(model, x)
    live = model.requiring_grad(theta=True, phi=train_encoder)
    with torch.enable_grad():
        z = latent_z(live, x, latents, track_encoder=train_encoder)
        value = per_datum(live, x, z).mean()
        if not bool(torch.isfinite(value)):
            raise DivergenceError("objective value")
        inputs = [live.decoder.values, live.log_gamma]
        if train_encoder:
            inputs.append(live.encoder.values)
        grads = torch.autograd.grad(value, inputs, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for g, t in zip(grads, inputs)]

    reported = float(value.detach())
    if report_extra is not None:
        with torch.enable_grad():
            reported += float(report_extra(model, x, latents.z).mean().detach())

    return ObjectiveEstimate(
        value=reported,
        grad_decoder=ParamVector(model.decoder.spec, grads[0].detach()),
        grad_log_gamma=float(grads[1]),
        samples_used=latents,
        grad_encoder=ParamVector(model.encoder.spec, grads[2].detach()) if train_encoder else None,
    )


def elbo_estimate(model: GaussianVae, x, latents: LatentBatch) -> ObjectiveEstimate:
    """ELBO: mean_s log N(x; g(z_s), gamma I) - KL[q || N(0, I)] with the KL in closed form."""
    return _estimate(model, x, latents, elbo_per_datum)


def m1_estimate(
    model: GaussianVae, x, latents: LatentBatch, include_xscore: bool = False
) -> ObjectiveEstimate:
    """
    Theta-only M1: mean_s (1/2)||s_p||^2 - d_x/gamma.

    With include_xscore the encoder-score term (1/2) mean_s ||s_q||^2 is added
    to the reported value only; it never enters the theta gradient.
    """
    extra = xscore_term_per_datum if include_xscore else None
    return _estimate(model, x, latents, m1_tilde_per_datum, report_extra=extra)


def m2_estimate(model: GaussianVae, x, latents: LatentBatch) -> ObjectiveEstimate:
    """M2: mean_s ||s_p||^2 - d_x/gamma - (1/2)||mean_s s_p||^2."""
    if latents.n_samples < 2:
        logger.warning("M2 with S=1: the batch-mean score term cancels half the first term")
    return _estimate(model, x, latents, m2_per_datum)


def m3_estimate(model: GaussianVae, x, latents: LatentBatch) -> ObjectiveEstimate:
    """M3: mean_s s_q . s_p - d_x/gamma + (1/2)||mean_s s_p||^2."""
    return _estimate(model, x, latents, m3_per_datum)


def joint_fd_per_datum(model: GaussianVae, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    return (
        posterior_fd_per_datum(model, x, z)
        + m1_tilde_per_datum(model, x, z)
        + xscore_term_per_datum(model, x, z)
    )


def joint_fd_estimate(model: GaussianVae, x, latents: LatentBatch) -> ObjectiveEstimate:
    """
    Joint FD (FD autoencoder): posterior FD plus full M1, with gradients for
    both the decoder and the encoder through reparametrized samples.

    Raises:
        ValueError: If the latents are not reparametrized
    """
    if not latents.reparametrized:
        raise ValueError("joint FD trains the encoder through z and needs reparametrized latents")
    return _estimate(model, x, latents, joint_fd_per_datum, train_encoder=True)


def posterior_fd_estimate(model: GaussianVae, x, latents: LatentBatch) -> float:
    """Batch mean of the posterior Fisher divergence estimate."""
    x = prepare_x(model, x)
    value = posterior_fd_per_datum(model, x, latents.z).mean()
    return float(value.detach())


OBJECTIVE_ESTIMATORS = {
    ObjectiveKind.ELBO: elbo_estimate,
    ObjectiveKind.M1: m1_estimate,
    ObjectiveKind.M2: m2_estimate,
    ObjectiveKind.M3: m3_estimate,
    ObjectiveKind.JOINT_FD: joint_fd_estimate,
}

PER_DATUM = {
    ObjectiveKind.ELBO: elbo_per_datum,
    ObjectiveKind.M1: m1_tilde_per_datum,
    ObjectiveKind.M2: m2_per_datum,
    ObjectiveKind.M3: m3_per_datum,
    ObjectiveKind.JOINT_FD: joint_fd_per_datum,
}


def estimate_objective(
    kind: ObjectiveKind, model: GaussianVae, x, latents: LatentBatch
) -> ObjectiveEstimate:
    return OBJECTIVE_ESTIMATORS[ObjectiveKind(kind)](model, x, latents)


# ============================================================================
# 3. Autoencoding Reductions
# ============================================================================

@dataclass(frozen=True)
class AutoencodingLosses:
    """
    Batch means of the autoencoding losses on one set of latent samples.

    l_2 is the printed form ||x - E g||^2 + 2 E||g||^2. l_2_exact is the form
    that M2 reduces to on finite samples: ||x - E g||^2 + 2 sum_j Var[g_j].
    recon = ||x - E g||^2 and cross = E[s_q . (x - g)] feed the M3 reduction.
    """
    l_k: float
    l_2: float
    l_2_exact: float
    recon: float
    cross: float
    d_x: int

    def l3_value(self) -> float:
        """M3 with gamma optimized out: -(cross + d_x)^2 / (2 recon)."""
        _, min_value = gamma_optimal(self.recon, self.cross + self.d_x)
        return min_value


def autoenc_losses(model: GaussianVae, x, latents: LatentBatch) -> AutoencodingLosses:
    """Sample means and 1/S variances of g over the provided latents."""
    x = prepare_x(model, x)
    z = latents.z
    with torch.no_grad():
        g = decode(model, z)
        g_mean = g.mean(0)
        recon = ((x - g_mean) ** 2).sum(-1)
        variance = ((g - g_mean) ** 2).mean(0).sum(-1)
        energy = (g * g).sum(-1).mean(0)
    _, score_x = encoder_scores(model, x, z)
    cross = (score_x.detach() * (x - g)).sum(-1).mean(0)
    return AutoencodingLosses(
        l_k=float((recon + variance).mean()),
        l_2=float((recon + 2.0 * energy).mean()),
        l_2_exact=float((recon + 2.0 * variance).mean()),
        recon=float(recon.mean()),
        cross=float(cross.mean()),
        d_x=model.d_x,
    )


class UtilityKind(str, Enum):
    H_K = "h_k"
    H_F = "h_f"


def utility_h(kind: UtilityKind, y: float, d_x: int) -> float:
    """
    Concave utilities wrapping the autoencoding losses.

    h_K(y) = d_x log(y / d_x) / 2, h_F(y) = -d_x^2 / (2 y).

    Raises:
        ValueError: If y <= 0 or d_x < 1
    """
    if not (math.isfinite(y) and y > 0):
        raise ValueError(f"utility_h needs y > 0, got {y}")
    if d_x < 1:
        raise ValueError(f"d_x must be >= 1, got {d_x}")
    if UtilityKind(kind) is UtilityKind.H_K:
        return d_x * math.log(y / d_x) / 2.0
    return -(d_x**2) / (2.0 * y)


def gamma_optimal(a: float, b: float) -> tuple[float, float]:
    """
    Minimize a/(2 gamma^2) - b/gamma over gamma > 0.

    Returns:
        (gamma* = a/b, minimum = -b^2/(2a))

    Raises:
        ValueError: If a <= 0, or b <= 0 (the infimum is not attained)
    """
    if not (math.isfinite(a) and a > 0):
        raise ValueError(f"gamma_optimal needs a > 0, got {a}")
    if not (math.isfinite(b) and b > 0):
        raise ValueError(f"gamma_optimal needs b > 0 (infimum not attained), got {b}")
    return a / b, -(b * b) / (2.0 * a)


def closed_form_gamma(kind: ObjectiveKind, losses: AutoencodingLosses) -> Optional[float]:
    """
    Optimal gamma for the objective given running-average autoencoding losses.

    ELBO and M1 share gamma* = L_K / d_x. M2 uses its exact loss; M3 uses
    recon / (cross + d_x). Returns None when the optimum is not attained.
    """
    kind = ObjectiveKind(kind)
    if kind in (ObjectiveKind.ELBO, ObjectiveKind.M1, ObjectiveKind.JOINT_FD):
        a, b = losses.l_k, float(losses.d_x)
    elif kind is ObjectiveKind.M2:
        a, b = losses.l_2_exact, float(losses.d_x)
    else:
        a, b = losses.recon, losses.cross + losses.d_x
    if a <= 0 or b <= 0:
        logger.warning(f"Closed-form gamma skipped for {kind.value}: a={a:.4g}, b={b:.4g}")
        return None
    gamma_star, _ = gamma_optimal(a, b)
    return gamma_star


# ============================================================================
# 4. Reference Expansions
# ============================================================================

def tight_q_expansion(mu, precision, optimal) -> float:
    """
    ||mu||^2 + Tr((L* - L) L^-1 (L* - L)^T) for q = N(mu, L^-1) and the
    optimal precision L*. This is the unhalved posterior FD when the decoder
    is linear and x = g(mu); posterior_fd_estimate equals half of it.
    """
    mu = torch.as_tensor(mu, dtype=DTYPE)
    precision = torch.as_tensor(precision, dtype=DTYPE)
    gap = torch.as_tensor(optimal, dtype=DTYPE) - precision
    trace = torch.trace(gap @ torch.linalg.inv(precision) @ gap.T)
    return float((mu * mu).sum() + trace)


def m3_equivalence_gap(
    model: GaussianVae,
    x,
    latents: LatentBatch,
    data_score: Callable[[torch.Tensor], torch.Tensor],
    c_pi: float,
) -> torch.Tensor:
    """
    Per-datum (M3 + C_pi) - (1/2)||grad log pi(x) - mean_s s_p||^2.

    Its mean over data drawn from pi is zero in expectation, which is the
    numerical form of the M3 equivalence.
    """
    x = prepare_x(model, x)
    z = latents.z
    with torch.no_grad():
        s_p = _scores_p(model, x, z)
    m3 = m3_per_datum(model, x, z).detach()
    diff = data_score(x) - s_p.mean(0)
    rhs = 0.5 * (diff * diff).sum(-1)
    return m3 + c_pi - rhs


def elbo_reference(model: GaussianVae, x, latents: LatentBatch) -> float:
    """Second ELBO implementation from per-sample log-density sums."""
    x = prepare_x(model, x)
    with torch.no_grad():
        mu, log_sigma = encode(model, x)
        z = latents.z
        total = torch.zeros(x.shape[:-1], dtype=DTYPE)
        for s in range(z.shape[0]):
            g = decode(model, z[s])
            sq = torch.zeros(x.shape[:-1], dtype=DTYPE)
            for j in range(model.d_x):
                sq = sq + (x[..., j] - g[..., j]) ** 2
            total = total + (
                -sq / (2.0 * model.gamma) - 0.5 * model.d_x * (LOG_2PI + model.log_gamma)
            )
        kl = torch.zeros(x.shape[:-1], dtype=DTYPE)
        for j in range(model.d_z):
            var = torch.exp(2.0 * log_sigma[..., j])
            kl = kl + 0.5 * (mu[..., j] ** 2 + var - 1.0 - 2.0 * log_sigma[..., j])
        return float((total / z.shape[0] - kl).mean())
