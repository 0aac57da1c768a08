"""
Training loop: J encoder updates, optional K unrolled encoder steps, then one
decoder update, repeated until the step budget is spent.

Seed lineage of a run (all derived from config.seed):
    train stream   minibatches
    test stream    held-out evaluation batch
    init           network initialization
    noise          every epsilon drawn during training
    eval/<step>    evaluation randomness at a given step
"""

from __future__ import annotations

import math
import time
from enum import Enum
from typing import NamedTuple, Optional

import torch
from pydantic import BaseModel, ConfigDict, Field

from ..config import defaults
from ..config.schemas import GammaMode, TrainConfig
from ..errors import DivergenceError
from ..logging import get_logger
from ..utils import derive_seed, make_generator
from .diffcore import DTYPE, MlpSpec, OptimizerState, ParamVector, optimizer_step
from .evalsuite import MetricsRecord, test_metrics
from .gaussmodel import GaussianVae, encode, sample_latents
from .inference import InferenceKind, infer_grad, inference_per_datum
from .objectives import (
    PER_DATUM,
    AutoencodingLosses,
    ObjectiveKind,
    autoenc_losses,
    closed_form_gamma,
    estimate_objective,
    joint_fd_estimate,
    prepare_x,
)
from .synthdata import TEST_STREAM, TRAIN_STREAM, DataStream, heldout_batch

logger = get_logger(__name__)

EVAL_STREAM = 2
INIT_STREAM = 3
NOISE_STREAM = 4


class RunStatus(str, Enum):
    COMPLETED = "completed"
    DIVERGED = "diverged"


class ModelDump(BaseModel):
    """Plain-JSON form of a GaussianVae."""
    decoder_spec: dict
    decoder: list[float]
    log_gamma: float
    encoder_spec: dict
    encoder: list[float]

    @classmethod
    def from_model(cls, model: GaussianVae) -> ModelDump:
        return cls(
            decoder_spec=model.decoder.spec.to_dict(),
            decoder=model.decoder.values.detach().tolist(),
            log_gamma=float(model.log_gamma),
            encoder_spec=model.encoder.spec.to_dict(),
            encoder=model.encoder.values.detach().tolist(),
        )

    def to_model(self) -> GaussianVae:
        decoder = ParamVector(MlpSpec.from_dict(self.decoder_spec), torch.tensor(self.decoder, dtype=DTYPE))
        encoder = ParamVector(MlpSpec.from_dict(self.encoder_spec), torch.tensor(self.encoder, dtype=DTYPE))
        return GaussianVae(decoder, torch.tensor(self.log_gamma, dtype=DTYPE), encoder)


class RunLog(BaseModel):
    """Append-only record of one training run."""
    model_config = ConfigDict(ser_json_inf_nan="constants")

    config: TrainConfig
    records: list[MetricsRecord] = Field(default_factory=list)
    final_model: ModelDump
    status: RunStatus = RunStatus.COMPLETED
    divergence: Optional[str] = Field(None, description="Divergence message, if any")
    steps_completed: int = 0
    wall_clock: float = Field(0.0, description="Seconds spent in train_run")
    seed_lineage: dict[str, int] = Field(default_factory=dict)

    def append(self, record: MetricsRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError(f"Records are append-only: step {record.step} after {self.records[-1].step}")
        self.records.append(record)

    @property
    def final_record(self) -> Optional[MetricsRecord]:
        return self.records[-1] if self.records else None


# ============================================================================
# 1. Bi-level Gradient
# ============================================================================

class BilevelResult(NamedTuple):
    grad_theta: torch.Tensor
    encoder: ParamVector
    value: float


def bilevel_theta_grad(
    model: GaussianVae,
    x,
    K: int,
    inner_step_size: float,
    objective: ObjectiveKind,
    S: int,
    generator: torch.Generator,
    inference: InferenceKind = InferenceKind.KLD_REPARAM,
    outer_eps: Optional[torch.Tensor] = None,
) -> BilevelResult:
    """
    Gradient of the objective in theta with the encoder made a function of theta.

    Unrolls K plain-SGD encoder steps phi_{k+1} = phi_k - eta grad_phi L_inf
    keeping the graph, evaluates the objective at phi_K(theta) on
    reparametrized samples and differentiates through the whole chain.

    Args:
        model: Current model
        x: Minibatch (B, d_x)
        K: Unrolled steps, 1..MAX_UNROLL_STEPS
        inner_step_size: SGD step size of the unrolled steps
        objective: m2 or m3
        S: q-samples per datum for the inner and outer estimates
        generator: Source of all epsilon draws
        inference: Inner encoder objective
        outer_eps: Fixed epsilon (S, B, d_z) for the outer estimate

    Returns:
        BilevelResult with grad_theta (decoder params then log gamma),
        the updated encoder phi_K and the objective value

    Raises:
        ValueError: If K is outside 1..MAX_UNROLL_STEPS or the objective is not m2/m3
        DivergenceError: If an inner or outer loss goes non-finite
    """
    objective = ObjectiveKind(objective)
    if objective not in (ObjectiveKind.M2, ObjectiveKind.M3):
        raise ValueError(f"Bi-level updates apply to m2 and m3, got {objective.value}")
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if K > defaults.MAX_UNROLL_STEPS:
        raise ValueError(f"K={K} exceeds the unroll cap of {defaults.MAX_UNROLL_STEPS}")
    x = prepare_x(model, x)
    inference = InferenceKind(inference)
    inner_objective = inference_per_datum(inference)
    live = model.requiring_grad(theta=True, phi=True)
    eps_shape = (S, *x.shape[:-1], model.d_z)

    def at(phi: torch.Tensor) -> GaussianVae:
        return GaussianVae(live.decoder, live.log_gamma, live.encoder.with_values(phi))

    with torch.enable_grad():
        phi = live.encoder.values
        for k in range(K):
            current = at(phi)
            eps = torch.randn(eps_shape, generator=generator, dtype=DTYPE)
            mu, log_sigma = encode(current, x)
            z = mu + torch.exp(log_sigma) * eps
            if not inference.reparametrized:
                z = z.detach()
            inner = inner_objective(current, x, z).mean()
            if not bool(torch.isfinite(inner)):
                raise DivergenceError("bi-level inner objective", step=k)
            (grad_phi,) = torch.autograd.grad(inner, phi, create_graph=True)
            phi = phi - inner_step_size * grad_phi

        final = at(phi)
        if outer_eps is None:
            outer_eps = torch.randn(eps_shape, generator=generator, dtype=DTYPE)
        mu, log_sigma = encode(final, x)
        z = mu + torch.exp(log_sigma) * outer_eps
        value = PER_DATUM[objective](final, x, z).mean()
        if not bool(torch.isfinite(value)):
            raise DivergenceError("bi-level objective")
        grads = torch.autograd.grad(value, [live.decoder.values, live.log_gamma], allow_unused=True)

    grads = [torch.zeros_like(t) if g is None else g for g, t in zip(grads, [live.decoder.values, live.log_gamma])]
    grad_theta = torch.cat([grads[0].detach().reshape(-1), grads[1].detach().reshape(1)])
    return BilevelResult(grad_theta, ParamVector(model.encoder.spec, phi.detach()), float(value.detach()))


# ============================================================================
# 2. Training Loop
# ============================================================================

def _mean_losses(history: list[AutoencodingLosses]) -> AutoencodingLosses:
    n = len(history)
    return AutoencodingLosses(
        l_k=sum(h.l_k for h in history) / n,
        l_2=sum(h.l_2 for h in history) / n,
        l_2_exact=sum(h.l_2_exact for h in history) / n,
        recon=sum(h.recon for h in history) / n,
        cross=sum(h.cross for h in history) / n,
        d_x=history[0].d_x,
    )


def _optimizer(settings, n_params: int) -> OptimizerState:
    return OptimizerState.create(
        settings.kind, n_params, settings.step_size, settings.beta1, settings.beta2, settings.eps
    )


def seed_lineage(seed: int) -> dict[str, int]:
    return {
        "root": int(seed),
        "train": derive_seed(seed, TRAIN_STREAM),
        "test": derive_seed(seed, TEST_STREAM),
        "init": derive_seed(seed, INIT_STREAM),
        "noise": derive_seed(seed, NOISE_STREAM),
    }


def eval_generator(seed: int, step: int) -> torch.Generator:
    """Generator for the evaluation at ``step``; cmd_eval uses it to reproduce a record."""
    return make_generator(derive_seed(seed, EVAL_STREAM, step))


def initial_model(config: TrainConfig) -> GaussianVae:
    return GaussianVae.initialize(
        d_x=config.dataset.dim,
        d_z=config.latent_dim,
        hidden=config.hidden,
        activation=config.activation,
        generator=make_generator(derive_seed(config.seed, INIT_STREAM)),
        log_gamma=math.log(config.gamma_init),
    )


def evaluate(model: GaussianVae, config: TrainConfig, step: int, test_x: torch.Tensor) -> MetricsRecord:
    return test_metrics(
        model,
        test_x,
        eval_generator(config.seed, step),
        n_samples=config.eval_samples,
        n_importance=config.eval_importance,
        step=step,
    )


def train_run(config: TrainConfig, stream: Optional[DataStream] = None) -> RunLog:
    """
    Alternate encoder and decoder updates for the step budget and return the full log.

    Divergence never raises: the run stops, the log is marked ``diverged`` and
    keeps the last finite parameters plus every record taken so far.
    """
    started = time.perf_counter()
    stream = stream or DataStream(config.dataset, config.seed, TRAIN_STREAM)
    test_x = heldout_batch(config.dataset, config.n_test, config.seed)
    noise = make_generator(derive_seed(config.seed, NOISE_STREAM))

    model = initial_model(config)
    n_decoder = model.decoder.spec.n_params
    theta_opt = _optimizer(config.decoder_optimizer, n_decoder + 1)
    phi_opt = _optimizer(config.encoder_optimizer, model.encoder.spec.n_params)
    learn_gamma = config.gamma_mode is GammaMode.JOINT_GRADIENT
    objective = config.objective
    inference = config.inference
    epoch_losses: list[AutoencodingLosses] = []

    log = RunLog(
        config=config,
        final_model=ModelDump.from_model(model),
        seed_lineage=seed_lineage(config.seed),
    )
    logger.info(
        f"Training {objective.value}/{inference.value} J={config.J} K={config.K} S={config.S} "
        f"on {config.dataset.name.value} for {config.total_steps} steps (seed {config.seed})"
    )

    step = 0
    try:
        for step in range(1, config.total_steps + 1):
            if objective is ObjectiveKind.JOINT_FD:
                x = stream.next(config.batch_size)
                latents = sample_latents(model, x, config.S, noise)
                estimate = joint_fd_estimate(model, x, latents)
                grad_theta = estimate.grad_theta
                phi, phi_opt = optimizer_step(phi_opt, model.encoder, estimate.grad_encoder, step)
                model = GaussianVae(model.decoder, model.log_gamma, phi)
            else:
                x = None
                for j in range(config.J):
                    if x is None or config.fresh_minibatch_per_encoder_update:
                        x = stream.next(config.batch_size)
                    inner = sample_latents(model, x, config.S, noise, reparametrized=inference.reparametrized)
                    grad_phi = infer_grad(inference, model, x, inner)
                    phi, phi_opt = optimizer_step(phi_opt, model.encoder, grad_phi, step)
                    model = model.with_encoder(phi.values)
                if x is None:
                    x = stream.next(config.batch_size)

                if config.K > 0:
                    result = bilevel_theta_grad(
                        model, x, config.K, config.effective_inner_step_size,
                        objective, config.S, noise, inference,
                    )
                    grad_theta = result.grad_theta
                    model = model.with_encoder(result.encoder.values)
                    latents = (
                        sample_latents(model, x, config.S, noise)
                        if config.gamma_mode is GammaMode.CLOSED_FORM else None
                    )
                else:
                    latents = sample_latents(model, x, config.S, noise)
                    estimate = estimate_objective(objective, model, x, latents)
                    grad_theta = -estimate.grad_theta if objective.maximized else estimate.grad_theta

            if config.gamma_mode is GammaMode.CLOSED_FORM:
                epoch_losses.append(autoenc_losses(model, x, latents))
            if not learn_gamma:
                grad_theta = grad_theta.clone()
                grad_theta[-1] = 0.0

            theta, theta_opt = optimizer_step(theta_opt, model.theta_values, grad_theta, step)
            model = model.with_theta(theta)

            if config.gamma_mode is GammaMode.CLOSED_FORM and step % config.steps_per_epoch == 0:
                gamma_star = closed_form_gamma(objective, _mean_losses(epoch_losses))
                epoch_losses = []
                if gamma_star is not None:
                    model = GaussianVae(model.decoder, torch.tensor(math.log(gamma_star), dtype=DTYPE), model.encoder)
                    logger.debug(f"Step {step}: closed-form gamma = {gamma_star:.6g}")

            log.steps_completed = step
            log.final_model = ModelDump.from_model(model)

            if config.eval_every and step % config.eval_every == 0 and step != config.total_steps:
                record = evaluate(model, config, step, test_x)
                log.append(record)
                logger.info(f"Step {step}: nll={record.nll:.4f} fd={record.marginal_fd_score:.4f}")
    except DivergenceError as e:
        log.status = RunStatus.DIVERGED
        log.divergence = str(e) if e.step is not None else f"{e} at step {step}"
        logger.warning(f"Run diverged: {log.divergence}")
    else:
        record = evaluate(model, config, config.total_steps, test_x)
        log.append(record)
        logger.info(f"Final: nll={record.nll:.4f} (se {record.nll_se:.3g}) mmd={record.latent_mmd:.4g}")

    log.wall_clock = time.perf_counter() - started
    return log
