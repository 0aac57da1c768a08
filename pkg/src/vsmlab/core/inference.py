"""
Encoder-update gradients and univariate gradient oracles.

Three ways to move q(z|x) toward p(z|x):
    kld_reparam   reverse KL through z = mu + sigma * eps
    fd_reparam    posterior Fisher divergence through z = mu + sigma * eps
    fd_noreparam  posterior Fisher divergence with z held fixed (biased gradient)

The closed forms below are for univariate Gaussians q = N(m1, s1^2) and
target p = N(m2, s2^2), with the Fisher divergence taken without a 1/2 factor.
"""

from __future__ import annotations

import math
from enum import Enum
from typing import Callable, Optional

import numpy as np
import torch

from ..errors import DivergenceError
from ..logging import get_logger
from .diffcore import DTYPE, ParamVector
from .gaussmodel import (
    LOG_2PI,
    GaussianVae,
    LatentBatch,
    encode,
    latent_z,
    log_likelihood,
    log_prior,
)
from .objectives import prepare_x, posterior_fd_per_datum

logger = get_logger(__name__)


class InferenceKind(str, Enum):
    """Encoder update rule. fd_reparam is kept to reproduce its local-optimum pathology."""
    KLD_REPARAM = "kld_reparam"
    FD_REPARAM = "fd_reparam"
    FD_NOREPARAM = "fd_noreparam"

    @property
    def reparametrized(self) -> bool:
        return self is not InferenceKind.FD_NOREPARAM


# ============================================================================
# 1. Encoder Gradients
# ============================================================================

def kld_per_datum(model: GaussianVae, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """E_q[log q - log p(z) - log p(x|z)] with the Gaussian entropy in closed form."""
    _, log_sigma = encode(model, x)
    neg_entropy = -(log_sigma.sum(-1) + 0.5 * model.d_z * (1.0 + LOG_2PI))
    return neg_entropy - (log_prior(z) + log_likelihood(model, x, z)).mean(0)


def _encoder_grad(
    model: GaussianVae,
    x,
    latents: LatentBatch,
    per_datum: Callable[[GaussianVae, torch.Tensor, torch.Tensor], torch.Tensor],
    through_samples: bool,
) -> ParamVector:
    x = prepare_x(model, x)
    live = model.requiring_grad(theta=False, phi=True)
    with torch.enable_grad():
        z = latent_z(live, x, latents, track_encoder=through_samples)
        value = per_datum(live, x, z).mean()
        if not bool(torch.isfinite(value)):
            raise DivergenceError("inference objective")
        (grad,) = torch.autograd.grad(value, live.encoder.values)
    return ParamVector(model.encoder.spec, grad.detach())


def kld_infer_grad(model: GaussianVae, x, latents: LatentBatch) -> ParamVector:
    """
    Reparametrized gradient of KL[q(z|x) || p(z|x)] in the encoder parameters.

    Raises:
        ValueError: If the latents are not reparametrized
    """
    if not latents.reparametrized:
        raise ValueError("kld_infer_grad needs reparametrized latents")
    return _encoder_grad(model, x, latents, kld_per_datum, through_samples=True)


def fd_infer_grad(model: GaussianVae, x, latents: LatentBatch, reparam: bool) -> ParamVector:
    """
    Gradient of the posterior FD in the encoder parameters.

    With reparam the samples move with the encoder; without it only the
    q-score term inside the integrand depends on the encoder.
    """
    if reparam and not latents.reparametrized:
        raise ValueError("fd_infer_grad(reparam=True) needs reparametrized latents")
    return _encoder_grad(model, x, latents, posterior_fd_per_datum, through_samples=reparam)


def infer_grad(kind: InferenceKind, model: GaussianVae, x, latents: LatentBatch) -> ParamVector:
    kind = InferenceKind(kind)
    if kind is InferenceKind.KLD_REPARAM:
        return kld_infer_grad(model, x, latents)
    return fd_infer_grad(model, x, latents, reparam=kind is InferenceKind.FD_REPARAM)


def inference_per_datum(kind: InferenceKind):
    """Per-datum inference objective, used when unrolling encoder steps."""
    if InferenceKind(kind) is InferenceKind.KLD_REPARAM:
        return kld_per_datum
    return posterior_fd_per_datum


# ============================================================================
# 2. Univariate Closed Forms
# ============================================================================

def gaussian_kl_grad(m1: float, s1: float, m2: float, s2: float) -> tuple[float, float]:
    """d/d(m1, s1) of KL[N(m1, s1^2) || N(m2, s2^2)]."""
    return (m1 - m2) / s2**2, (s1**2 - s2**2) / (s1 * s2**2)


def gaussian_fisher_grad(m1: float, s1: float, m2: float, s2: float) -> tuple[float, float]:
    """d/d(m1, s1) of the Fisher divergence (reparametrized gradient)."""
    return 2.0 * (m1 - m2) / s2**4, 2.0 * (s1**4 - s2**4) / (s1**3 * s2**4)


def gaussian_biased_fisher_grad(m1: float, s1: float, m2: float, s2: float) -> tuple[float, float]:
    """Expected gradient of the FD integrand at fixed samples (no reparametrization)."""
    return 2.0 * (m1 - m2) / (s1**2 * s2**2), 4.0 * (s1**2 - s2**2) / (s1**3 * s2**2)


class GradientFamily(str, Enum):
    KLD = "kld"
    FD = "fd"
    BIASED_FD = "biased_fd"


CLOSED_FORM_GRADS = {
    GradientFamily.KLD: gaussian_kl_grad,
    GradientFamily.FD: gaussian_fisher_grad,
    GradientFamily.BIASED_FD: gaussian_biased_fisher_grad,
}


def univariate_gradients_mc(
    family: GradientFamily,
    m1: float,
    s1: float,
    m2: float,
    s2: float,
    n_samples: int,
    generator: torch.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Monte-Carlo estimate of d/d(m1, s1) for one gradient family.

    Every sample gets its own copy of (m1, s1), so one backward pass yields
    per-sample gradients and hence a standard error.

    Returns:
        (mean gradient [d_m, d_s], standard error [se_m, se_s])
    """
    family = GradientFamily(family)
    eps = torch.randn(n_samples, generator=generator, dtype=DTYPE)
    m = torch.full((n_samples,), float(m1), dtype=DTYPE, requires_grad=True)
    s = torch.full((n_samples,), float(s1), dtype=DTYPE, requires_grad=True)

    with torch.enable_grad():
        z = m + s * eps
        score_p = lambda y: -(y - m2) / s2**2  # noqa: E731
        if family is GradientFamily.KLD:
            per_sample = -torch.log(s) + 0.5 * ((z - m2) / s2) ** 2
        elif family is GradientFamily.FD:
            per_sample = (-(z - m) / s**2 - score_p(z)) ** 2
        else:
            fixed = z.detach()
            per_sample = (-(fixed - m) / s**2 - score_p(fixed)) ** 2
        grad_m, grad_s = torch.autograd.grad(per_sample.sum(), (m, s))

    per = torch.stack([grad_m, grad_s], dim=1).numpy()
    mean = per.mean(axis=0)
    se = per.std(axis=0, ddof=1) / math.sqrt(n_samples)
    return mean, se


# ============================================================================
# 3. Laplace Degeneracy
# ============================================================================

def _laplace_samples(m: float, samples) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(samples, dtype=np.float64), dtype=DTYPE).reshape(-1)
    at_location = x == m
    if bool(at_location.any()):
        logger.warning(f"Excluding {int(at_location.sum())} sample(s) exactly at the location {m}")
        x = x[~at_location]
    return x


def _standard_normal_score(x: torch.Tensor) -> torch.Tensor:
    return -x


def _laplace_biased_fd_grad(
    m: float, s: float, samples, wrt: str, target_score: Optional[Callable] = None
) -> float:
    x = _laplace_samples(m, samples)
    if x.numel() == 0:
        raise ValueError("No samples left after excluding the Laplace location")
    target_score = target_score or _standard_normal_score
    m_t = torch.tensor(float(m), dtype=DTYPE, requires_grad=True)
    s_t = torch.tensor(float(s), dtype=DTYPE, requires_grad=True)
    with torch.enable_grad():
        score_q = -torch.sign(x - m_t) / s_t
        loss = ((score_q - target_score(x)) ** 2).mean()
        (grad,) = torch.autograd.grad(loss, m_t if wrt == "location" else s_t)
    return float(grad)


def laplace_biased_location_grad(m: float, s: float, samples, target_score=None) -> float:
    """
    Biased (fixed-sample) FD gradient of a Laplace(m, s) q in its location.

    The Laplace score -sign(x - m)/s is flat in m away from x = m, so the
    result is exactly zero. Samples sitting exactly at m are dropped.
    """
    if s <= 0:
        raise ValueError(f"Laplace scale must be positive, got {s}")
    return _laplace_biased_fd_grad(m, s, samples, "location", target_score)


def laplace_biased_scale_grad(m: float, s: float, samples, target_score=None) -> float:
    """Biased FD gradient of a Laplace(m, s) q in its scale (generically nonzero)."""
    if s <= 0:
        raise ValueError(f"Laplace scale must be positive, got {s}")
    return _laplace_biased_fd_grad(m, s, samples, "scale", target_score)


def laplace_kld_closed(m: float, s: float, m2: float, s2: float) -> float:
    """KL[Laplace(m, s) || N(m2, s2^2)]."""
    neg_entropy = -math.log(2.0 * s) - 1.0
    cross = 0.5 * math.log(2.0 * math.pi * s2**2) + ((m - m2) ** 2 + 2.0 * s**2) / (2.0 * s2**2)
    return neg_entropy + cross


def laplace_kld_location_grad(
    m: float, s: float, m2: float, s2: float, n_samples: int, generator: torch.Generator
) -> tuple[float, float]:
    """
    Reparametrized MC gradient of KL[Laplace(m, s) || N(m2, s2^2)] in m.

    Returns:
        (mean, standard error)
    """
    u = torch.rand(n_samples, generator=generator, dtype=DTYPE) - 0.5
    noise = -torch.sign(u) * torch.log1p(-2.0 * u.abs())
    m_t = torch.full((n_samples,), float(m), dtype=DTYPE, requires_grad=True)
    with torch.enable_grad():
        x = m_t + s * noise
        per_sample = 0.5 * ((x - m2) / s2) ** 2
        (grad,) = torch.autograd.grad(per_sample.sum(), m_t)
    return float(grad.mean()), float(grad.std() / math.sqrt(n_samples))
