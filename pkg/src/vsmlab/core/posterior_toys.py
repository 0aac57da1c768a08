"""
Toy posterior experiments on R^2.

Two unnormalized posteriors with a standard normal prior:
    p_I:  x ~ N(z1 * z2, sd^2)        (x=2, sd=0.5)
    p_II: x ~ N(z1 * relu(z2), sd^2)  (x=1, sd=1)

toy_posterior_trace fits a diagonal Gaussian q to one of them from a grid of
starting means and records the path of the mean. gmm_fd_fit fits a Gaussian
mixture with the fixed-sample (biased) FD gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Protocol, Sequence

import numpy as np
import torch

from ..config import defaults
from ..errors import DivergenceError
from ..logging import get_logger
from ..utils import derive_seed, make_generator
from .diffcore import DTYPE, OptimizerKind, OptimizerState, optimizer_step
from .inference import InferenceKind

logger = get_logger(__name__)


# ============================================================================
# 1. Targets
# ============================================================================

class ScoreTarget(Protocol):
    """A target density known up to a constant, with its score."""

    dim: int

    def log_density(self, z: torch.Tensor) -> torch.Tensor: ...

    def score(self, z: torch.Tensor) -> torch.Tensor: ...


class ToyLikelihood(str, Enum):
    P_I = "p_i"
    P_II = "p_ii"


@dataclass(frozen=True)
class ToyPosteriorSpec:
    """Posterior over z in R^2 under a standard normal prior and one scalar observation."""
    likelihood: ToyLikelihood
    x: float
    sd: float
    dim: int = 2

    def __post_init__(self):
        object.__setattr__(self, "likelihood", ToyLikelihood(self.likelihood))
        if self.sd <= 0:
            raise ValueError(f"noise sd must be positive, got {self.sd}")

    @classmethod
    def default(cls, likelihood: ToyLikelihood) -> ToyPosteriorSpec:
        if ToyLikelihood(likelihood) is ToyLikelihood.P_I:
            return cls(ToyLikelihood.P_I, defaults.TOY_I_X, defaults.TOY_I_SD)
        return cls(ToyLikelihood.P_II, defaults.TOY_II_X, defaults.TOY_II_SD)

    def _mean(self, z: torch.Tensor) -> torch.Tensor:
        if self.likelihood is ToyLikelihood.P_I:
            return z[..., 0] * z[..., 1]
        return z[..., 0] * torch.relu(z[..., 1])

    def log_density(self, z: torch.Tensor) -> torch.Tensor:
        residual = self.x - self._mean(z)
        return -0.5 * (z * z).sum(-1) - 0.5 * residual**2 / self.sd**2

    def score(self, z: torch.Tensor) -> torch.Tensor:
        """Analytic posterior score; the relu derivative at 0 is taken as 0."""
        z1, z2 = z[..., 0], z[..., 1]
        weight = (self.x - self._mean(z)) / self.sd**2
        if self.likelihood is ToyLikelihood.P_I:
            grad_mean = torch.stack([z2, z1], dim=-1)
        else:
            grad_mean = torch.stack([torch.relu(z2), z1 * (z2 > 0).to(z.dtype)], dim=-1)
        return -z + weight.unsqueeze(-1) * grad_mean


@dataclass(frozen=True)
class GaussianTarget:
    """Diagonal Gaussian target N(mean, diag sd^2)."""
    mean: tuple[float, ...]
    sd: tuple[float, ...]

    @property
    def dim(self) -> int:
        return len(self.mean)

    def log_density(self, z: torch.Tensor) -> torch.Tensor:
        mean = torch.tensor(self.mean, dtype=DTYPE)
        sd = torch.tensor(self.sd, dtype=DTYPE)
        return (-0.5 * ((z - mean) / sd) ** 2).sum(-1)

    def score(self, z: torch.Tensor) -> torch.Tensor:
        mean = torch.tensor(self.mean, dtype=DTYPE)
        sd = torch.tensor(self.sd, dtype=DTYPE)
        return -(z - mean) / sd**2


# ============================================================================
# 2. Diagonal-Gaussian fits (traces)
# ============================================================================

@dataclass
class TraceRecord:
    """Path of one diagonal-Gaussian fit started from ``init_mean``."""
    index: int
    init_mean: tuple[float, float]
    optimizer: OptimizerKind
    inference: InferenceKind
    means: list[tuple[float, float]] = field(default_factory=list)
    log_sds: list[tuple[float, float]] = field(default_factory=list)
    converged: bool = False
    diverged: bool = False

    @property
    def final_mean(self) -> tuple[float, float]:
        return self.means[-1] if self.means else self.init_mean

    @property
    def steps_run(self) -> int:
        return len(self.means)


def gaussian_fit_objective(
    inference: InferenceKind,
    target: ScoreTarget,
    params: torch.Tensor,
    eps: torch.Tensor,
) -> torch.Tensor:
    """
    Divergence of q = N(m, diag exp(2 log_s)) from the target, params = [m, log_s].

    KLD uses the closed-form entropy; the FD variants use the 1/2 convention.
    """
    dim = target.dim
    m, log_s = params[:dim], params[dim:]
    s = torch.exp(log_s)
    z = m + s * eps
    if inference is InferenceKind.KLD_REPARAM:
        return -log_s.sum() - target.log_density(z).mean()
    if inference is InferenceKind.FD_NOREPARAM:
        z = z.detach()
    mismatch = -(z - m) / s**2 - target.score(z)
    return 0.5 * (mismatch * mismatch).sum(-1).mean()


def default_init_grid(
    extent: float = defaults.TRACE_GRID_EXTENT, points: int = defaults.TRACE_GRID_POINTS
) -> list[tuple[float, float]]:
    """Square grid of starting means on [-extent, extent]^2."""
    axis = np.linspace(-extent, extent, points)
    return [(float(a), float(b)) for a in axis for b in axis]


def toy_posterior_trace(
    spec: ScoreTarget,
    init_grid: Sequence[Sequence[float]],
    inference: InferenceKind,
    optimizer: OptimizerKind,
    steps: int = defaults.TRACE_STEPS,
    step_size: Optional[float] = None,
    n_samples: int = 20,
    seed: int = 0,
    init_sd: float = defaults.TRACE_INIT_SD,
    grad_tol: float = defaults.TRACE_GRAD_TOL,
) -> list[TraceRecord]:
    """
    Fit a diagonal Gaussian q from every starting mean in ``init_grid``.

    Each trace owns its generator (seed lineage: seed -> init index). A trace
    stops early when the gradient norm drops below ``grad_tol``; a non-finite
    gradient truncates it and flags it as diverged.
    """
    inference = InferenceKind(inference)
    optimizer = OptimizerKind(optimizer)
    if step_size is None:
        step_size = (
            defaults.TRACE_STEP_SIZE_ADAM
            if optimizer is OptimizerKind.ADAM
            else defaults.TRACE_STEP_SIZE_SGD
        )

    records = []
    for index, init in enumerate(init_grid):
        init = tuple(float(v) for v in init)
        generator = make_generator(derive_seed(seed, index))
        params = torch.tensor([*init, *([math.log(init_sd)] * spec.dim)], dtype=DTYPE)
        state = OptimizerState.create(optimizer, params.numel(), step_size)
        record = TraceRecord(index, init, optimizer, inference)

        for step in range(steps):
            eps = torch.randn((n_samples, spec.dim), generator=generator, dtype=DTYPE)
            live = params.clone().requires_grad_(True)
            with torch.enable_grad():
                value = gaussian_fit_objective(inference, spec, live, eps)
                (grad,) = torch.autograd.grad(value, live)
            try:
                params, state = optimizer_step(state, params, grad, step=step)
            except DivergenceError:
                logger.warning(f"Trace {index} diverged at step {step}; truncating")
                record.diverged = True
                break
            if not bool(torch.isfinite(params).all()):
                record.diverged = True
                break
            record.means.append(tuple(float(v) for v in params[: spec.dim]))
            record.log_sds.append(tuple(float(v) for v in params[spec.dim:]))
            if float(torch.linalg.vector_norm(grad)) < grad_tol:
                record.converged = True
                break
        records.append(record)
        logger.debug(f"Trace {index}: start {init} -> {record.final_mean}")
    return records


# ============================================================================
# 3. Gaussian-mixture fit by biased FD
# ============================================================================

@dataclass
class MixtureFit:
    """
    Fitted mixture parameters and the per-iteration FD loss.

    ``loss_trace`` holds the noisy minibatch losses. ``fd_estimate`` is the
    FD of the final mixture re-estimated on a large fresh sample; it is the
    number to compare across seeds.
    """
    weights: np.ndarray
    means: np.ndarray
    sds: np.ndarray
    loss_trace: list[float]
    seed: int
    fd_estimate: Optional[float] = None

    @property
    def final_loss(self) -> float:
        if self.fd_estimate is not None:
            return self.fd_estimate
        return self.loss_trace[-1]

    @property
    def top_weight(self) -> float:
        return float(np.max(self.weights))

    def packed_params(self) -> torch.Tensor:
        """Parameters in the layout mixture_log_density expects."""
        return torch.cat([
            torch.log(torch.as_tensor(self.weights, dtype=DTYPE)),
            torch.as_tensor(self.means, dtype=DTYPE).reshape(-1),
            torch.log(torch.as_tensor(self.sds, dtype=DTYPE)).reshape(-1),
        ])


def _unpack_mixture(params: torch.Tensor, components: int, dim: int):
    logits = params[:components]
    means = params[components: components + components * dim].reshape(components, dim)
    log_sds = params[components + components * dim:].reshape(components, dim)
    return logits, means, log_sds


def mixture_log_density(params: torch.Tensor, components: int, z: torch.Tensor) -> torch.Tensor:
    dim = z.shape[-1]
    logits, means, log_sds = _unpack_mixture(params, components, dim)
    log_weights = torch.log_softmax(logits, dim=0)
    scaled = (z.unsqueeze(-2) - means) * torch.exp(-log_sds)
    log_components = (-0.5 * scaled**2 - log_sds - 0.5 * math.log(2.0 * math.pi)).sum(-1)
    return torch.logsumexp(log_weights + log_components, dim=-1)


def _sample_mixture(params: torch.Tensor, components: int, dim: int, n: int, generator: torch.Generator):
    logits, means, log_sds = _unpack_mixture(params, components, dim)
    picks = torch.multinomial(torch.softmax(logits, dim=0), n, replacement=True, generator=generator)
    noise = torch.randn((n, dim), generator=generator, dtype=DTYPE)
    return (means[picks] + torch.exp(log_sds[picks]) * noise).detach()


def _mixture_fd_terms(params: torch.Tensor, components: int, target: ScoreTarget, z: torch.Tensor) -> torch.Tensor:
    """Per-sample (1/2) ||grad log q(z) - target score(z)||^2."""
    z = z.detach().requires_grad_(True)
    with torch.enable_grad():
        log_q = mixture_log_density(params.detach(), components, z)
        (score_q,) = torch.autograd.grad(log_q.sum(), z)
    mismatch = score_q - target.score(z.detach())
    return 0.5 * (mismatch * mismatch).sum(-1)


def mixture_fd(fit: MixtureFit, target: ScoreTarget, n_samples: int, generator: torch.Generator) -> float:
    """
    Monte-Carlo FD of a fitted mixture from the target on n fresh draws from the mixture.

    Raises:
        ValueError: If n_samples < 1
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    params = fit.packed_params()
    components = len(fit.weights)
    z = _sample_mixture(params, components, target.dim, n_samples, generator)
    return float(_mixture_fd_terms(params, components, target, z).mean())


def gmm_fd_fit(
    target: ScoreTarget,
    components: int = defaults.GMM_COMPONENTS,
    steps: int = defaults.GMM_STEPS,
    step_size: float = defaults.GMM_STEP_SIZE,
    samples_per_iter: int = defaults.GMM_SAMPLES_PER_ITER,
    seed: int = 0,
    fd_samples: int = defaults.GMM_FD_SAMPLES,
) -> MixtureFit:
    """
    Fit a Gaussian mixture q to the target by Adam on the fixed-sample FD gradient.

    Means start at prior draws, sds at 1 and weights equal. Each iteration
    draws samples from the current mixture, holds them fixed and
    differentiates (1/2) mean ||grad log q - target score||^2. After the last
    iteration the FD of the fitted mixture is re-estimated on ``fd_samples``
    fresh draws (seed lineage: seed -> 1); 0 skips it.

    Raises:
        ValueError: If components < 1
        DivergenceError: If the loss or its gradient stops being finite
    """
    if components < 1:
        raise ValueError(f"components must be >= 1, got {components}")
    dim = target.dim
    generator = make_generator(seed)
    init_means = torch.randn((components, dim), generator=generator, dtype=DTYPE)
    params = torch.cat([
        torch.zeros(components, dtype=DTYPE),
        init_means.reshape(-1),
        torch.zeros(components * dim, dtype=DTYPE),
    ])
    state = OptimizerState.create(OptimizerKind.ADAM, params.numel(), step_size)
    losses = []

    for step in range(steps):
        z = _sample_mixture(params, components, dim, samples_per_iter, generator).requires_grad_(True)
        live = params.clone().requires_grad_(True)
        with torch.enable_grad():
            log_q = mixture_log_density(live, components, z)
            (score_q,) = torch.autograd.grad(log_q.sum(), z, create_graph=True)
            mismatch = score_q - target.score(z.detach())
            loss = 0.5 * (mismatch * mismatch).sum(-1).mean()
            (grad,) = torch.autograd.grad(loss, live)
        value = loss.detach().item()
        if not math.isfinite(value):
            raise DivergenceError("mixture FD loss", step=step)
        losses.append(value)
        params, state = optimizer_step(state, params, grad, step=step)

        logits = params[:components]
        weights = torch.softmax(logits, dim=0)
        if bool((weights < defaults.GMM_WEIGHT_FLOOR).any()):
            logger.warning(f"Mixture weight collapse at step {step}; renormalizing")
            weights = weights.clamp_min(defaults.GMM_WEIGHT_FLOOR)
            weights = weights / weights.sum()
            params = params.clone()
            params[:components] = torch.log(weights)

    logits, means, log_sds = _unpack_mixture(params, components, dim)
    fit = MixtureFit(
        weights=torch.softmax(logits, dim=0).numpy(),
        means=means.numpy().copy(),
        sds=torch.exp(log_sds).numpy(),
        loss_trace=losses,
        seed=seed,
    )
    if fd_samples > 0:
        fit.fd_estimate = mixture_fd(fit, target, fd_samples, make_generator(derive_seed(seed, 1)))
        logger.debug(f"Mixture fit seed {seed}: FD {fit.fd_estimate:.4g} on {fd_samples} draws")
    return fit
