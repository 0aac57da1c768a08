"""
Diffcore - dense feed-forward networks over flat parameter vectors.

A network is an MlpSpec (widths + hidden activation) plus a ParamVector holding
every weight and bias in one float64 tensor. Reverse mode (vjp) and forward
mode (jvp) go through torch autograd; the SGD and Adam steppers are explicit
recurrences over the flat vector.

Layout of a ParamVector: for each layer l, the (w_l x w_{l+1}) weight matrix in
row-major order, then the w_{l+1} bias. A layer computes h @ W + b.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Sequence, Union

import torch
import torch.nn.functional as F

from ..config import defaults
from ..errors import DivergenceError

DTYPE = torch.float64


# ============================================================================
# 1. Immutable Data Structures
# ============================================================================

class Activation(str, Enum):
    """Hidden-layer activation. The output layer is always affine."""
    RELU = "relu"
    TANH = "tanh"
    SOFTPLUS = "softplus"


_ACTIVATIONS = {
    Activation.RELU: torch.relu,
    Activation.TANH: torch.tanh,
    Activation.SOFTPLUS: F.softplus,
}


@dataclass(frozen=True)
class LayerSlot:
    """Where one layer's weight and bias live inside the flat vector."""
    weight: slice
    weight_shape: tuple[int, int]
    bias: slice


@dataclass(frozen=True)
class MlpSpec:
    """
    Architecture of a dense network.

    Attributes:
        layer_widths: Input dim first, output dim last; at least 2 entries
        activation: Applied to every hidden layer
    """
    layer_widths: tuple[int, ...]
    activation: Activation = Activation.SOFTPLUS

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2:
            raise ValueError(f"layer_widths needs at least 2 entries, got {list(widths)}")
        if any(w < 1 for w in widths):
            raise ValueError(f"All layer widths must be >= 1, got {list(widths)}")
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def n_params(self) -> int:
        widths = self.layer_widths
        return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))

    def layout(self) -> tuple[LayerSlot, ...]:
        """Per-layer slices into the flat vector (a pure function of the widths)."""
        slots = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            w_end = offset + fan_in * fan_out
            b_end = w_end + fan_out
            slots.append(LayerSlot(slice(offset, w_end), (fan_in, fan_out), slice(w_end, b_end)))
            offset = b_end
        return tuple(slots)

    def to_dict(self) -> dict:
        return {"layer_widths": list(self.layer_widths), "activation": self.activation.value}

    @classmethod
    def from_dict(cls, data: dict) -> MlpSpec:
        return cls(tuple(data["layer_widths"]), Activation(data["activation"]))


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat, layout-tagged storage of all trainable scalars of one network."""
    spec: MlpSpec
    values: torch.Tensor

    def __post_init__(self):
        values = torch.as_tensor(self.values, dtype=DTYPE).reshape(-1)
        if values.numel() != self.spec.n_params:
            raise ValueError(
                f"ParamVector length {values.numel()} does not match spec "
                f"{list(self.spec.layer_widths)} ({self.spec.n_params} params)"
            )
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.spec.n_params

    @classmethod
    def zeros(cls, spec: MlpSpec) -> ParamVector:
        return cls(spec, torch.zeros(spec.n_params, dtype=DTYPE))

    @classmethod
    def initialize(cls, spec: MlpSpec, generator: torch.Generator) -> ParamVector:
        """Glorot-uniform weights, zero biases."""
        values = torch.zeros(spec.n_params, dtype=DTYPE)
        for slot in spec.layout():
            fan_in, fan_out = slot.weight_shape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            draw = torch.rand(fan_in * fan_out, generator=generator, dtype=DTYPE)
            values[slot.weight] = (2.0 * draw - 1.0) * limit
        return cls(spec, values)

    def with_values(self, values: torch.Tensor) -> ParamVector:
        return ParamVector(self.spec, values)

    def layers(self) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """(W, b) views of the flat vector; autograd flows through them."""
        return unflatten(self.spec, self.values)

    def detached(self) -> ParamVector:
        return ParamVector(self.spec, self.values.detach().clone())


# ============================================================================
# 2. Forward Pass
# ============================================================================

def unflatten(spec: MlpSpec, values: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Split a flat tensor into per-layer (W, b) views."""
    return [
        (values[slot.weight].reshape(slot.weight_shape), values[slot.bias])
        for slot in spec.layout()
    ]


def network_forward(spec: MlpSpec, values: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
    """
    Evaluate the network on raw tensors, keeping the autograd graph.

    ``inputs`` may carry any number of leading batch dimensions. This is the
    building block every differentiable estimator in the package calls.
    """
    act = _ACTIVATIONS[spec.activation]
    h = inputs
    layers = unflatten(spec, values)
    for index, (weight, bias) in enumerate(layers):
        h = h @ weight + bias
        if index < len(layers) - 1:
            h = act(h)
    return h


def _check_dim(name: str, tensor: torch.Tensor, expected: int) -> None:
    if tensor.dim() == 0 or tensor.shape[-1] != expected:
        shape = tuple(tensor.shape)
        raise ValueError(f"{name} has trailing dimension {shape}, expected {expected}")


def _as_tensor(value) -> torch.Tensor:
    return torch.as_tensor(value, dtype=DTYPE)


def mlp_forward(spec: MlpSpec, params: ParamVector, input) -> torch.Tensor:
    """
    Evaluate the network.

    Args:
        spec: Network architecture
        params: Flat parameters laid out for ``spec``
        input: Vector of length layer_widths[0] (leading batch dims allowed)

    Returns:
        Output of length layer_widths[-1]

    Raises:
        ValueError: If the input dimension does not match the spec
    """
    x = _as_tensor(input)
    _check_dim("input", x, spec.input_dim)
    with torch.no_grad():
        return network_forward(spec, params.values, x)


def mlp_vjp(
    spec: MlpSpec, params: ParamVector, input, cotangent
) -> tuple[ParamVector, torch.Tensor]:
    """
    Reverse-mode product: gradients of (cotangent . output).

    Returns:
        (grad_params, grad_input)

    Raises:
        ValueError: On input or cotangent dimension mismatch
    """
    x = _as_tensor(input)
    c = _as_tensor(cotangent)
    _check_dim("input", x, spec.input_dim)
    _check_dim("cotangent", c, spec.output_dim)

    values = params.values.detach().clone().requires_grad_(True)
    x = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        out = network_forward(spec, values, x)
        if c.shape != out.shape:
            raise ValueError(f"cotangent shape {tuple(c.shape)} != output shape {tuple(out.shape)}")
        grad_values, grad_input = torch.autograd.grad(out, (values, x), grad_outputs=c)
    return ParamVector(spec, grad_values), grad_input


def mlp_jvp(spec: MlpSpec, params: ParamVector, input, tangent) -> torch.Tensor:
    """
    Forward-mode product J(input) @ tangent.

    Raises:
        ValueError: On input or tangent dimension mismatch
    """
    x = _as_tensor(input)
    t = _as_tensor(tangent)
    _check_dim("input", x, spec.input_dim)
    _check_dim("tangent", t, spec.input_dim)
    if t.shape != x.shape:
        raise ValueError(f"tangent shape {tuple(t.shape)} != input shape {tuple(x.shape)}")

    values = params.values.detach()
    _, out_tangent = torch.func.jvp(lambda inp: network_forward(spec, values, inp), (x,), (t,))
    return out_tangent


def mlp_jacobian(spec: MlpSpec, params: ParamVector, input) -> torch.Tensor:
    """Assemble the (output_dim x input_dim) Jacobian at one input, column by column."""
    x = _as_tensor(input)
    _check_dim("input", x, spec.input_dim)
    if x.dim() != 1:
        raise ValueError("mlp_jacobian takes a single input vector")
    eye = torch.eye(spec.input_dim, dtype=DTYPE)
    columns = [mlp_jvp(spec, params, x, eye[j]) for j in range(spec.input_dim)]
    return torch.stack(columns, dim=1)


# ============================================================================
# 3. Optimizers
# ============================================================================

class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass(frozen=True, eq=False)
class OptimizerState:
    """
    Optimizer settings plus the Adam moment estimates for one parameter vector.

    The state is a value: optimizer_step returns a new one.
    """
    kind: OptimizerKind
    step_size: float
    m: torch.Tensor
    v: torch.Tensor
    beta1: float = defaults.ADAM_BETA1
    beta2: float = defaults.ADAM_BETA2
    eps: float = defaults.ADAM_EPS
    t: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", OptimizerKind(self.kind))
        if not (math.isfinite(self.step_size) and self.step_size > 0):
            raise ValueError(f"step_size must be positive and finite, got {self.step_size}")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError(f"Adam betas must lie in (0, 1), got ({self.beta1}, {self.beta2})")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.m.shape != self.v.shape:
            raise ValueError("Adam moment arrays must have the same length")

    @classmethod
    def create(
        cls,
        kind: Union[OptimizerKind, str],
        n_params: int,
        step_size: float,
        beta1: float = defaults.ADAM_BETA1,
        beta2: float = defaults.ADAM_BETA2,
        eps: float = defaults.ADAM_EPS,
    ) -> OptimizerState:
        zeros = torch.zeros(n_params, dtype=DTYPE)
        return cls(OptimizerKind(kind), float(step_size), zeros, zeros.clone(), beta1, beta2, eps)


ParamsLike = Union[ParamVector, torch.Tensor]


def optimizer_step(
    state: OptimizerState,
    params: ParamsLike,
    grad: ParamsLike,
    step: Optional[int] = None,
) -> tuple[ParamsLike, OptimizerState]:
    """
    Apply one SGD or Adam update.

    Args:
        state: Current optimizer state
        params: Parameters (ParamVector or flat tensor)
        grad: Gradient with the same length as params
        step: Training step, only used in divergence messages

    Returns:
        (updated params of the same type as ``params``, new state)

    Raises:
        ValueError: If grad and params lengths differ
        DivergenceError: If the gradient has non-finite entries
    """
    p = params.values if isinstance(params, ParamVector) else torch.as_tensor(params, dtype=DTYPE)
    g = grad.values if isinstance(grad, ParamVector) else torch.as_tensor(grad, dtype=DTYPE)
    p = p.detach().reshape(-1)
    g = g.detach().reshape(-1)

    if g.numel() != p.numel():
        raise ValueError(f"grad length {g.numel()} != params length {p.numel()}")
    if state.m.numel() != p.numel():
        raise ValueError(f"optimizer tracks {state.m.numel()} params, got {p.numel()}")
    if not bool(torch.isfinite(g).all()):
        raise DivergenceError("gradient", step=step)

    t = state.t + 1
    if state.kind is OptimizerKind.SGD:
        new_p = p - state.step_size * g
        new_state = replace(state, t=t)
    else:
        m = state.beta1 * state.m + (1.0 - state.beta1) * g
        v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
        bc1 = 1.0 - state.beta1 ** t
        bc2 = 1.0 - state.beta2 ** t
        new_p = p - state.step_size * (m / bc1) / (torch.sqrt(v / bc2) + state.eps)
        new_state = replace(state, m=m, v=v, t=t)

    if isinstance(params, ParamVector):
        return params.with_values(new_p), new_state
    return new_p.reshape(torch.as_tensor(params).shape), new_state


def concat_values(parts: Sequence[torch.Tensor]) -> torch.Tensor:
    """Flatten and join tensors (e.g. decoder values and log gamma) into one vector."""
    return torch.cat([torch.as_tensor(p, dtype=DTYPE).reshape(-1) for p in parts])
