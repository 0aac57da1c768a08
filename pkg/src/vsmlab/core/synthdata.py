"""
Synthetic training distributions.

Five 2D shapes plus the 1D linear-toy stream. Every sampler is a pure
function of (dataset, n, seed); training and test streams use disjoint seed
lineages derived from the run seed.
"""

from __future__ import annotations

import math
from enum import Enum
from pathlib import Path

import torch
from pydantic import BaseModel, ConfigDict, Field

from ..utils import derive_seed, make_generator, write_csv
from .diffcore import DTYPE

TRAIN_STREAM = 0
TEST_STREAM = 1


class DatasetName(str, Enum):
    BANANA = "banana"
    FUNNEL = "funnel"
    STAR = "star"
    RING = "ring"
    GRID_OF_GAUSSIANS = "grid_of_gaussians"
    LINEAR_TOY = "linear_toy"


class DatasetId(BaseModel):
    """A dataset name plus the linear-toy parameters (ignored by the 2D shapes)."""
    model_config = ConfigDict(frozen=True)

    name: DatasetName = Field(DatasetName.BANANA, description="Dataset generator")
    theta_star: float = Field(2.0, description="Ground-truth slope for linear_toy")
    gamma: float = Field(0.5, gt=0, description="Likelihood variance for linear_toy")

    @property
    def dim(self) -> int:
        return 1 if self.name is DatasetName.LINEAR_TOY else 2


def _banana(n: int, g: torch.Generator) -> torch.Tensor:
    u = torch.randn((n, 2), generator=g, dtype=DTYPE)
    return torch.stack([u[:, 0], u[:, 1] + u[:, 0] ** 2 / 4.0 - 1.0], dim=1)


def _funnel(n: int, g: torch.Generator) -> torch.Tensor:
    # z1 has variance 3; z2 | z1 has variance exp(z1 / 2)
    z1 = math.sqrt(3.0) * torch.randn(n, generator=g, dtype=DTYPE)
    z2 = torch.exp(z1 / 4.0) * torch.randn(n, generator=g, dtype=DTYPE)
    return torch.stack([z1, z2], dim=1)


def _star(n: int, g: torch.Generator) -> torch.Tensor:
    k = torch.randint(0, 6, (n,), generator=g)
    angle = k.to(DTYPE) * (math.pi / 3.0)
    centers = torch.stack([torch.cos(angle), torch.sin(angle)], dim=1)
    return centers + 0.15 * torch.randn((n, 2), generator=g, dtype=DTYPE)


def _ring(n: int, g: torch.Generator) -> torch.Tensor:
    angle = 2.0 * math.pi * torch.rand(n, generator=g, dtype=DTYPE)
    radius = 2.0 + 0.05 * torch.randn(n, generator=g, dtype=DTYPE)
    return torch.stack([radius * torch.cos(angle), radius * torch.sin(angle)], dim=1)


def _grid(n: int, g: torch.Generator) -> torch.Tensor:
    idx = torch.randint(0, 9, (n,), generator=g)
    centers = torch.stack([(idx // 3 - 1).to(DTYPE), (idx % 3 - 1).to(DTYPE)], dim=1) * 1.5
    return centers + 0.1 * torch.randn((n, 2), generator=g, dtype=DTYPE)


_SHAPES = {
    DatasetName.BANANA: _banana,
    DatasetName.FUNNEL: _funnel,
    DatasetName.STAR: _star,
    DatasetName.RING: _ring,
    DatasetName.GRID_OF_GAUSSIANS: _grid,
}


def _draw(dataset: DatasetId, n: int, generator: torch.Generator) -> torch.Tensor:
    if dataset.name is DatasetName.LINEAR_TOY:
        sd = math.sqrt(dataset.theta_star**2 + dataset.gamma)
        return sd * torch.randn((n, 1), generator=generator, dtype=DTYPE)
    return _SHAPES[dataset.name](n, generator)


def sample_dataset(dataset: DatasetId | str, n: int, seed: int) -> torch.Tensor:
    """
    Draw n i.i.d. points (shape (n, dim)), deterministic in seed.

    Raises:
        ValueError: If n < 1 or the dataset name is unknown
    """
    if isinstance(dataset, str):
        dataset = DatasetId(name=DatasetName(dataset))
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return _draw(dataset, n, make_generator(seed))


class DataStream:
    """Endless seeded minibatch source for one run (train or test lineage)."""

    def __init__(self, dataset: DatasetId, seed: int, stream: int = TRAIN_STREAM):
        self.dataset = dataset
        self.seed = derive_seed(seed, stream)
        self._generator = make_generator(self.seed)

    def next(self, n: int) -> torch.Tensor:
        return _draw(self.dataset, n, self._generator)


def heldout_batch(dataset: DatasetId, n: int, seed: int) -> torch.Tensor:
    """Held-out points from the test lineage of ``seed``."""
    return sample_dataset(dataset, n, derive_seed(seed, TEST_STREAM))


def dump_dataset_csv(points: torch.Tensor, path: Path) -> Path:
    """Write points to CSV with columns x1, x2, ..."""
    header = [f"x{j + 1}" for j in range(points.shape[1])]
    return write_csv(path, header, (list(map(float, row)) for row in points.tolist()))
