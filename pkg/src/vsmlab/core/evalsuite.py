"""
Test-time metrics for a trained Gaussian VAE.

Standard errors:
    importance-sampled metrics (nll, marginal fd) split the M proposal samples
    into folds and report the spread of the fold estimates;
    batch metrics (mmd, posterior fd, recon mse, neg-elbo) split the test batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from ..config import defaults
from ..errors import DivergenceError
from ..logging import get_logger
from .diffcore import DTYPE
from .gaussmodel import GaussianVae, decode, encode, log_likelihood, log_prior, log_q, sample_latents
from .objectives import elbo_per_datum, posterior_fd_per_datum, prepare_x

logger = get_logger(__name__)

METRIC_COLUMNS = [
    "step", "nll", "nll_se", "fd", "fd_se", "mmd", "post_fd", "recon_mse", "neg_elbo",
]
HISTOGRAM_COLUMNS = ["bin_left", "mass"]


class MetricsRecord(BaseModel):
    """One evaluation snapshot. Every value is finite unless ``diverged`` is set."""
    model_config = ConfigDict(ser_json_inf_nan="constants")

    step: int = Field(..., ge=0, description="Training step of the snapshot")
    nll: float
    nll_se: float
    marginal_fd_score: float
    marginal_fd_se: float
    latent_mmd: float
    latent_mmd_se: float
    posterior_fd: float
    posterior_fd_se: float
    recon_mse: float
    recon_mse_se: float
    neg_elbo: float
    neg_elbo_se: float
    sd_histogram: list[float] = Field(default_factory=list, description="Posterior-SD bin masses")
    diverged: bool = False

    def csv_row(self) -> list:
        return [
            self.step, self.nll, self.nll_se, self.marginal_fd_score, self.marginal_fd_se,
            self.latent_mmd, self.posterior_fd, self.recon_mse, self.neg_elbo,
        ]


@dataclass(frozen=True)
class MetricEstimate:
    value: float
    se: float


# ============================================================================
# 1. Helpers
# ============================================================================

def _fold_sizes(total: int, folds: int) -> list[int]:
    folds = max(1, min(folds, total))
    base, extra = divmod(total, folds)
    return [base + (1 if k < extra else 0) for k in range(folds)]


def _spread_se(fold_values: list[float]) -> float:
    if len(fold_values) < 2:
        return 0.0
    values = np.asarray(fold_values, dtype=np.float64)
    return float(values.std(ddof=1) / math.sqrt(len(values)))


def batch_fold_estimate(per_datum: torch.Tensor, folds: int = defaults.EVAL_FOLDS) -> MetricEstimate:
    """Batch mean with an SE from the spread of fold means."""
    per_datum = per_datum.detach().reshape(-1)
    parts = torch.split(per_datum, _fold_sizes(per_datum.numel(), folds))
    return MetricEstimate(float(per_datum.mean()), _spread_se([float(p.mean()) for p in parts]))


def _chunk_size(batch: int) -> int:
    return max(1, defaults.IS_CHUNK_ELEMENTS // max(batch, 1))


class _WeightedSums:
    """
    Running self-normalized sums over importance samples, per datum.

    Stores log-sum-exp of the log weights and the weight-normalized sums of
    s and ||s||^2 relative to the running maximum.
    """

    def __init__(self, batch_shape: torch.Size, d_x: int):
        self.log_max = torch.full(batch_shape, -math.inf, dtype=DTYPE)
        self.total = torch.zeros(batch_shape, dtype=DTYPE)
        self.score = torch.zeros((*batch_shape, d_x), dtype=DTYPE)
        self.score_sq = torch.zeros(batch_shape, dtype=DTYPE)
        self.count = 0

    def add(self, log_w: torch.Tensor, s_p: Optional[torch.Tensor] = None) -> None:
        new_max = torch.maximum(self.log_max, log_w.max(0).values)
        safe_max = torch.where(torch.isfinite(new_max), new_max, torch.zeros_like(new_max))
        rescale = torch.exp(self.log_max - safe_max)
        w = torch.exp(log_w - safe_max)
        self.total = self.total * rescale + w.sum(0)
        if s_p is not None:
            self.score = self.score * rescale.unsqueeze(-1) + (w.unsqueeze(-1) * s_p).sum(0)
            self.score_sq = self.score_sq * rescale + (w * (s_p * s_p).sum(-1)).sum(0)
        self.log_max = safe_max
        self.count += int(log_w.shape[0])

    def merge(self, other: _WeightedSums) -> _WeightedSums:
        merged = _WeightedSums(self.total.shape, self.score.shape[-1])
        new_max = torch.maximum(self.log_max, other.log_max)
        a = torch.exp(self.log_max - new_max)
        b = torch.exp(other.log_max - new_max)
        merged.log_max = new_max
        merged.total = self.total * a + other.total * b
        merged.score = self.score * a.unsqueeze(-1) + other.score * b.unsqueeze(-1)
        merged.score_sq = self.score_sq * a + other.score_sq * b
        merged.count = self.count + other.count
        return merged

    def log_mean_weight(self) -> torch.Tensor:
        return torch.log(self.total) + self.log_max - math.log(self.count)


def _importance_folds(
    model: GaussianVae,
    x: torch.Tensor,
    n_samples: int,
    generator: torch.Generator,
    folds: int,
    with_scores: bool,
) -> list[_WeightedSums]:
    with torch.no_grad():
        mu, log_sigma = encode(model, x)
        chunk = _chunk_size(int(np.prod(x.shape[:-1])) if x.dim() > 1 else 1)
        results = []
        for size in _fold_sizes(n_samples, folds):
            sums = _WeightedSums(x.shape[:-1], model.d_x)
            done = 0
            while done < size:
                c = min(chunk, size - done)
                eps = torch.randn((c, *x.shape[:-1], model.d_z), generator=generator, dtype=DTYPE)
                z = mu + torch.exp(log_sigma) * eps
                log_w = log_prior(z) + log_likelihood(model, x, z) - log_q(mu, log_sigma, z)
                s_p = -(x - decode(model, z)) / model.gamma if with_scores else None
                sums.add(log_w, s_p)
                done += c
            if not bool(torch.isfinite(sums.log_max).all()):
                raise DivergenceError("importance weights")
            results.append(sums)
    return results


# ============================================================================
# 2. Metrics
# ============================================================================

def nll_importance(
    model: GaussianVae,
    x,
    n_samples: int,
    generator: torch.Generator,
    folds: int = defaults.EVAL_FOLDS,
) -> MetricEstimate:
    """
    -log (1/M) sum_m p(z_m) p(x|z_m) / q(z_m|x), averaged over the test batch.

    Raises:
        ValueError: If n_samples < 1
        DivergenceError: If every importance weight of some datum is zero
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    x = prepare_x(model, x)
    parts = _importance_folds(model, x, n_samples, generator, folds, with_scores=False)
    fold_values = [float(-p.log_mean_weight().mean()) for p in parts]
    combined = parts[0]
    for part in parts[1:]:
        combined = combined.merge(part)
    return MetricEstimate(float(-combined.log_mean_weight().mean()), _spread_se(fold_values))


def _marginal_fd_from(sums: _WeightedSums, model: GaussianVae) -> torch.Tensor:
    s_hat = sums.score / sums.total.unsqueeze(-1)
    sq_hat = sums.score_sq / sums.total
    norm_sq = (s_hat * s_hat).sum(-1)
    return -model.d_x / model.gamma + sq_hat - 0.5 * norm_sq


def marginal_fd_score(
    model: GaussianVae,
    x,
    n_samples: int,
    generator: torch.Generator,
    folds: int = defaults.EVAL_FOLDS,
) -> MetricEstimate:
    """
    Score-matching loss (1/2)||grad log p(x)||^2 + Laplacian log p(x) of the model marginal.

    grad log p(x) = E_{p(z|x)}[s_p] and the Laplacian is
    -d_x/gamma + E||s_p||^2 - ||E s_p||^2, with the posterior expectations
    estimated by self-normalized importance sampling from q.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    x = prepare_x(model, x)
    parts = _importance_folds(model, x, n_samples, generator, folds, with_scores=True)
    with torch.no_grad():
        fold_values = [float(_marginal_fd_from(p, model).mean()) for p in parts]
        combined = parts[0]
        for part in parts[1:]:
            combined = combined.merge(part)
        value = float(_marginal_fd_from(combined, model).mean())
    if not math.isfinite(value):
        raise DivergenceError("marginal score")
    return MetricEstimate(value, _spread_se(fold_values))


def cubic_kernel(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """k(a, b) = (a.b / d + 1)^3 for every pair of rows."""
    d = a.shape[-1]
    return (a @ b.T / d + 1.0) ** 3


def mmd_unbiased(X: torch.Tensor, Y: torch.Tensor, paired: bool = False) -> float:
    """
    Unbiased MMD^2 with the cubic kernel.

    The default U-statistic drops the diagonals of the within-set Gram
    matrices. The paired form needs equal sizes and also drops i == j in
    the cross terms, which makes it exactly zero for X == Y.

    Raises:
        ValueError: If either set has fewer than 2 points, or paired sizes differ
    """
    n, m = X.shape[0], Y.shape[0]
    if n < 2 or m < 2:
        raise ValueError(f"MMD needs at least 2 samples per set, got {n} and {m}")
    Kxx = cubic_kernel(X, X)
    Kyy = cubic_kernel(Y, Y)
    Kxy = cubic_kernel(X, Y)
    if paired:
        if n != m:
            raise ValueError("Paired MMD needs equal sample sizes")
        h = Kxx + Kyy - Kxy - Kxy.T
        return float((h.sum() - torch.diagonal(h).sum()) / (n * (n - 1)))
    xx = (Kxx.sum() - torch.diagonal(Kxx).sum()) / (n * (n - 1))
    yy = (Kyy.sum() - torch.diagonal(Kyy).sum()) / (m * (m - 1))
    return float(xx + yy - 2.0 * Kxy.mean())


def mmd_with_se(
    X: torch.Tensor, Y: torch.Tensor, folds: int = defaults.EVAL_FOLDS, paired: bool = False
) -> MetricEstimate:
    """MMD^2 on the full sets, SE from the spread over aligned folds."""
    value = mmd_unbiased(X, Y, paired)
    n = min(X.shape[0], Y.shape[0])
    k = max(1, min(folds, n // 2))
    fold_values = []
    if k >= 2:
        for xs, ys in zip(torch.tensor_split(X, k), torch.tensor_split(Y, k)):
            fold_values.append(mmd_unbiased(xs, ys, paired))
    return MetricEstimate(value, _spread_se(fold_values))


def latent_mmd(
    model: GaussianVae,
    x,
    generator: torch.Generator,
    paired: bool = False,
    folds: int = defaults.EVAL_FOLDS,
) -> MetricEstimate:
    """MMD^2 between one q-sample per test point and as many prior samples."""
    x = prepare_x(model, x)
    if x.dim() < 2 or x.shape[0] < 2:
        raise ValueError("latent_mmd needs a test batch of at least 2 points")
    latents = sample_latents(model, x, 1, generator)
    aggregate = latents.z[0]
    prior = torch.randn(aggregate.shape, generator=generator, dtype=DTYPE)
    return mmd_with_se(aggregate, prior, folds, paired)


def posterior_sd_histogram(model: GaussianVae, x) -> tuple[np.ndarray, np.ndarray]:
    """
    Histogram of every posterior standard deviation over the batch and latent dims.

    Values outside the bin range are clipped into the edge bins, so the
    masses sum to one.

    Returns:
        (bin left edges, masses)
    """
    x = prepare_x(model, x)
    with torch.no_grad():
        _, log_sigma = encode(model, x)
    sds = torch.exp(log_sigma).reshape(-1).numpy()
    low, high = defaults.HIST_RANGE
    counts, edges = np.histogram(np.clip(sds, low, high), bins=defaults.HIST_BINS, range=(low, high))
    masses = counts.astype(np.float64) / counts.sum()
    return edges[:-1], masses


def test_metrics(
    model: GaussianVae,
    x,
    generator: torch.Generator,
    n_samples: int = defaults.EVAL_Q_SAMPLES,
    n_importance: int = defaults.EVAL_IS_SAMPLES,
    step: int = 0,
) -> MetricsRecord:
    """
    Full evaluation snapshot on a test batch.

    A component that diverges is recorded as NaN and the record is flagged.
    """
    x = prepare_x(model, x)
    diverged = False

    def guarded(fn) -> MetricEstimate:
        nonlocal diverged
        try:
            estimate = fn()
        except DivergenceError as e:
            logger.warning(f"Metric diverged at step {step}: {e}")
            diverged = True
            return MetricEstimate(math.nan, math.nan)
        if not math.isfinite(estimate.value):
            diverged = True
        return estimate

    with torch.no_grad():
        mu, _ = encode(model, x)
        recon = ((x - decode(model, mu)) ** 2).mean(-1)
    recon_mse = batch_fold_estimate(recon)

    latents = sample_latents(model, x, n_samples, generator)
    post_fd = guarded(lambda: batch_fold_estimate(posterior_fd_per_datum(model, x, latents.z)))
    with torch.no_grad():
        neg_elbo = guarded(lambda: batch_fold_estimate(-elbo_per_datum(model, x, latents.z)))

    nll = guarded(lambda: nll_importance(model, x, n_importance, generator))
    marginal = guarded(lambda: marginal_fd_score(model, x, n_importance, generator))
    mmd = guarded(lambda: latent_mmd(model, x, generator))
    _, masses = posterior_sd_histogram(model, x)

    return MetricsRecord(
        step=step,
        nll=nll.value,
        nll_se=nll.se,
        marginal_fd_score=marginal.value,
        marginal_fd_se=marginal.se,
        latent_mmd=mmd.value,
        latent_mmd_se=mmd.se,
        posterior_fd=post_fd.value,
        posterior_fd_se=post_fd.se,
        recon_mse=recon_mse.value,
        recon_mse_se=recon_mse.se,
        neg_elbo=neg_elbo.value,
        neg_elbo_se=neg_elbo.se,
        sd_histogram=[float(m) for m in masses],
        diverged=diverged,
    )


test_metrics.__test__ = False


def histogram_rows(record: MetricsRecord) -> list[list[float]]:
    """(bin_left, mass) rows for the histogram CSV."""
    low, high = defaults.HIST_RANGE
    width = (high - low) / defaults.HIST_BINS
    return [[low + k * width, mass] for k, mass in enumerate(record.sd_histogram)]
