"""Tests for the synthetic dataset samplers."""

import math

import pytest
import torch

from vsmlab.core.synthdata import (
    DataStream,
    DatasetId,
    DatasetName,
    TEST_STREAM,
    TRAIN_STREAM,
    dump_dataset_csv,
    heldout_batch,
    sample_dataset,
)
from vsmlab.utils import read_csv


@pytest.mark.parametrize("name", list(DatasetName))
def test_samples_have_dataset_shape_and_are_deterministic(name):
    dataset = DatasetId(name=name)
    a = sample_dataset(dataset, 64, seed=5)
    b = sample_dataset(dataset, 64, seed=5)
    assert a.shape == (64, dataset.dim)
    assert a.dtype == torch.float64
    assert torch.equal(a, b)
    assert not torch.equal(a, sample_dataset(dataset, 64, seed=6))


def test_sample_dataset_accepts_name_string():
    assert sample_dataset("ring", 10, 0).shape == (10, 2)


def test_sample_dataset_rejects_bad_arguments():
    with pytest.raises(ValueError):
        sample_dataset("banana", 0, 0)
    with pytest.raises(ValueError):
        sample_dataset("spiral", 10, 0)


def test_ring_radius():
    points = sample_dataset("ring", 5000, 1)
    radius = points.norm(dim=1)
    assert float(radius.mean()) == pytest.approx(2.0, abs=0.01)


def test_linear_toy_marginal_variance():
    """Test that x ~ N(0, theta*^2 + gamma)."""
    dataset = DatasetId(name="linear_toy", theta_star=1.5, gamma=0.5)
    points = sample_dataset(dataset, 40_000, 2)
    assert float(points.var()) == pytest.approx(1.5**2 + 0.5, rel=0.03)


def test_funnel_first_coordinate_variance():
    points = sample_dataset("funnel", 40_000, 3)
    assert float(points[:, 0].var()) == pytest.approx(3.0, rel=0.03)


def test_train_and_test_streams_are_disjoint():
    dataset = DatasetId()
    train = DataStream(dataset, seed=7, stream=TRAIN_STREAM)
    first = train.next(8)
    second = train.next(8)
    assert not torch.equal(first, second)
    test = heldout_batch(dataset, 8, seed=7)
    assert not torch.equal(first, test)
    assert torch.equal(test, DataStream(dataset, seed=7, stream=TEST_STREAM).next(8))


def test_dump_dataset_csv(temp_dir):
    points = sample_dataset("star", 5, 0)
    path = dump_dataset_csv(points, temp_dir / "samples.csv")
    rows = read_csv(path)
    assert list(rows[0]) == ["x1", "x2"]
    assert len(rows) == 5
    assert float(rows[2]["x2"]) == float(points[2, 1])
    assert math.isfinite(float(rows[4]["x1"]))
