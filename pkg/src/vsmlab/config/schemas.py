"""
Pydantic configuration documents, one per subcommand.

Every document is read from JSON with unknown keys rejected, so a typo in a
config file surfaces as a field-path error instead of a silent default.
"""

from __future__ import annotations

import json
from enum import Enum
from pathlib import Path
from typing import Optional, Type, TypeVar

from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..core.diffcore import Activation, OptimizerKind
from ..core.inference import InferenceKind
from ..core.objectives import ObjectiveKind
from ..core.posterior_toys import ToyLikelihood
from ..core.synthdata import DatasetId
from ..errors import ConfigError
from . import defaults

ConfigT = TypeVar("ConfigT", bound=BaseModel)


class _Document(BaseModel):
    model_config = ConfigDict(extra="forbid")


class OptimizerSettings(_Document):
    """Optimizer for one network."""
    kind: OptimizerKind = Field(OptimizerKind.ADAM, description="sgd or adam")
    step_size: float = Field(1e-3, gt=0, description="Learning rate")
    beta1: float = Field(defaults.ADAM_BETA1, gt=0, lt=1)
    beta2: float = Field(defaults.ADAM_BETA2, gt=0, lt=1)
    eps: float = Field(defaults.ADAM_EPS, gt=0)


class GammaMode(str, Enum):
    """How the likelihood variance is learned."""
    JOINT_GRADIENT = "joint_gradient"
    CLOSED_FORM = "closed_form"
    FIXED = "fixed"


# ============================================================================
# 1. Training
# ============================================================================

class TrainConfig(_Document):
    """
    One training run.

    At most one of ``steps`` or ``epochs`` sets the decoder-update budget; an
    epoch is ``steps_per_epoch`` decoder updates and is also the period of the
    closed-form gamma update.
    """
    objective: ObjectiveKind = Field(ObjectiveKind.ELBO, description="Decoder objective")
    inference: InferenceKind = Field(InferenceKind.KLD_REPARAM, description="Encoder update rule")
    J: int = Field(1, ge=0, description="Encoder updates per decoder update")
    K: int = Field(0, ge=0, description="Bi-level (theta-parametrized) encoder steps")
    S: int = Field(1, ge=1, description="q-samples per datum")
    batch_size: int = Field(defaults.TRAIN_BATCH_SIZE, ge=1)
    steps: Optional[int] = Field(None, ge=0, description="Decoder updates")
    epochs: Optional[int] = Field(None, ge=0, description="Epochs of steps_per_epoch updates")
    steps_per_epoch: int = Field(100, ge=1)
    decoder_optimizer: OptimizerSettings = Field(default_factory=OptimizerSettings)
    encoder_optimizer: OptimizerSettings = Field(default_factory=OptimizerSettings)
    inner_step_size: Optional[float] = Field(
        None, ge=0, description="Bi-level SGD step size (defaults to the encoder step size)"
    )
    gamma_mode: GammaMode = Field(GammaMode.JOINT_GRADIENT)
    gamma_init: float = Field(1.0, gt=0, description="Initial likelihood variance")
    seed: int = Field(0, ge=0, lt=2**64, description="Root seed of the run")
    dataset: DatasetId = Field(default_factory=DatasetId)
    latent_dim: int = Field(defaults.LATENT_DIM, ge=1)
    hidden: list[int] = Field(default_factory=lambda: list(defaults.HIDDEN_WIDTHS))
    activation: Activation = Field(Activation.SOFTPLUS)
    eval_every: int = Field(0, ge=0, description="Evaluation cadence in steps (0: final only)")
    n_test: int = Field(1000, ge=2, description="Held-out points per evaluation")
    eval_samples: int = Field(defaults.EVAL_Q_SAMPLES, ge=1, description="q-samples per test point")
    eval_importance: int = Field(defaults.EVAL_IS_SAMPLES, ge=1, description="Importance samples M")
    fresh_minibatch_per_encoder_update: bool = Field(True)

    @model_validator(mode="after")
    def _check_consistency(self) -> TrainConfig:
        if self.K > 0 and self.objective not in (ObjectiveKind.M2, ObjectiveKind.M3):
            raise ValueError(f"K > 0 is only supported for m2 and m3, got objective {self.objective.value}")
        if self.K > defaults.MAX_UNROLL_STEPS:
            raise ValueError(f"K={self.K} exceeds the unroll cap of {defaults.MAX_UNROLL_STEPS}")
        if self.steps is not None and self.epochs is not None:
            raise ValueError("set at most one of steps or epochs")
        if self.steps is None and self.epochs is None:
            self.steps = defaults.TRAIN_STEPS
        if self.objective is ObjectiveKind.JOINT_FD and not self.inference.reparametrized:
            raise ValueError("joint_fd trains the encoder through reparametrized samples")
        if any(w < 1 for w in self.hidden):
            raise ValueError(f"hidden widths must be >= 1, got {self.hidden}")
        return self

    @property
    def total_steps(self) -> int:
        return self.steps if self.steps is not None else self.epochs * self.steps_per_epoch

    @property
    def effective_inner_step_size(self) -> float:
        if self.inner_step_size is not None:
            return self.inner_step_size
        return self.encoder_optimizer.step_size


class SweepConfig(_Document):
    """Cross product of objectives, inference rules, J, K and seeds over a base TrainConfig."""
    base: TrainConfig
    objectives: list[ObjectiveKind] = Field(
        default_factory=lambda: [ObjectiveKind.ELBO, ObjectiveKind.M1, ObjectiveKind.M2, ObjectiveKind.M3]
    )
    inferences: list[InferenceKind] = Field(
        default_factory=lambda: [InferenceKind.KLD_REPARAM, InferenceKind.FD_NOREPARAM]
    )
    J_values: list[int] = Field(default_factory=lambda: [1])
    K_values: list[int] = Field(default_factory=lambda: [0])
    seeds: list[int] = Field(default_factory=lambda: list(range(10)))

    def expand(self) -> list[TrainConfig]:
        """Valid member configs in a fixed order; combinations TrainConfig rejects are skipped."""
        configs = []
        for objective in self.objectives:
            for inference in self.inferences:
                if objective is ObjectiveKind.JOINT_FD and not inference.reparametrized:
                    continue
                for J in self.J_values:
                    for K in self.K_values:
                        if K > 0 and objective not in (ObjectiveKind.M2, ObjectiveKind.M3):
                            continue
                        for seed in self.seeds:
                            data = self.base.model_dump()
                            data.update(objective=objective, inference=inference, J=J, K=K, seed=seed)
                            configs.append(TrainConfig.model_validate(data))
        return configs


# ============================================================================
# 2. Toy Studies
# ============================================================================

class RecoverConfig(_Document):
    theta_stars: list[float] = Field(default_factory=lambda: list(defaults.RECOVER_THETA_GRID))
    alpha: float = Field(defaults.TOY_ALPHA, gt=0, description="Encoder variance scale")
    gamma: float = Field(defaults.TOY_GAMMA, gt=0, description="Likelihood variance")
    n_starts: int = Field(8, ge=1, description="Optimizer restarts per method")
    grid_points: int = Field(201, ge=3, description="Certification grid size per axis")
    seed: int = Field(0, ge=0)


class TracesConfig(_Document):
    likelihoods: list[ToyLikelihood] = Field(
        default_factory=lambda: [ToyLikelihood.P_I, ToyLikelihood.P_II]
    )
    inferences: list[InferenceKind] = Field(default_factory=lambda: list(InferenceKind))
    optimizers: list[OptimizerKind] = Field(
        default_factory=lambda: [OptimizerKind.SGD, OptimizerKind.ADAM]
    )
    steps: int = Field(defaults.TRACE_STEPS, ge=0)
    step_size: Optional[float] = Field(None, gt=0, description="Defaults per optimizer")
    n_samples: int = Field(20, ge=1, description="q-samples per step")
    grid_extent: float = Field(defaults.TRACE_GRID_EXTENT, gt=0)
    grid_points: int = Field(defaults.TRACE_GRID_POINTS, ge=1)
    init_sd: float = Field(defaults.TRACE_INIT_SD, gt=0)
    grad_tol: float = Field(defaults.TRACE_GRAD_TOL, gt=0)
    seed: int = Field(0, ge=0)


class GmmConfig(_Document):
    likelihoods: list[ToyLikelihood] = Field(
        default_factory=lambda: [ToyLikelihood.P_I, ToyLikelihood.P_II]
    )
    components: int = Field(defaults.GMM_COMPONENTS, ge=1)
    steps: int = Field(defaults.GMM_STEPS, ge=0)
    step_size: float = Field(defaults.GMM_STEP_SIZE, gt=0)
    samples_per_iter: int = Field(defaults.GMM_SAMPLES_PER_ITER, ge=1)
    seeds: list[int] = Field(default_factory=lambda: [0])
    fd_samples: int = Field(
        defaults.GMM_FD_SAMPLES, ge=0, description="Fresh draws for the final FD of each fit (0 skips it)"
    )


# ============================================================================
# 3. Evaluation, Checks and Data
# ============================================================================

class EvalConfig(_Document):
    """Evaluation of a dumped model; unset fields fall back to the run's TrainConfig."""
    n_test: Optional[int] = Field(None, ge=2)
    eval_samples: Optional[int] = Field(None, ge=1)
    eval_importance: Optional[int] = Field(None, ge=1)
    step: Optional[int] = Field(None, ge=0, description="Step label used for the evaluation seed")


class GradcheckConfig(_Document):
    n_networks: int = Field(20, ge=1, description="Random networks per derivative check")
    rel_tol: float = Field(1e-5, gt=0, description="Relative tolerance of finite-difference checks")
    seed: int = Field(0, ge=0)


class SampleConfig(_Document):
    dataset: DatasetId = Field(default_factory=DatasetId)
    n: int = Field(1000, ge=1)


# ============================================================================
# 4. Loading
# ============================================================================

def load_config(model: Type[ConfigT], path: Optional[Path]) -> ConfigT:
    """
    Read and validate a JSON config; no path gives the defaults.

    Raises:
        ConfigError: If the file is missing or not valid JSON
        pydantic.ValidationError: If the document violates the schema
    """
    if path is None:
        return model()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}", "--config")
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON ({e.msg} at line {e.lineno})", "--config") from e
    return model.model_validate(data)
