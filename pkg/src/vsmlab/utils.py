"""
Utility functions - Helper functions for common operations.

Output-directory guarding, seed lineage, environment knobs and CSV writing
shared by the CLI and the run persistence layer.
"""

import csv
import os
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError

MANIFEST_NAME = "manifest.json"


def resolve_output_dir(out: Optional[str], default: str, force: bool = False) -> Path:
    """
    Resolve the output directory of a run and refuse to clobber a previous one.

    Args:
        out: Optional directory string. If None, uses ``default`` under the cwd.
        default: Directory name used when ``out`` is None
        force: Allow writing into a directory that already holds a manifest

    Returns:
        Resolved Path object (created if missing)

    Raises:
        ConfigError: If the path is a file, or holds a previous run and force is False
    """
    resolved = (Path(out) if out else Path.cwd() / default).resolve()

    if resolved.exists() and not resolved.is_dir():
        raise ConfigError(f"Output path is not a directory: {resolved}", "--out")

    if (resolved / MANIFEST_NAME).exists() and not force:
        raise ConfigError(
            f"Output directory already holds a run: {resolved} (pass --force to overwrite)",
            "--out",
        )

    resolved.mkdir(parents=True, exist_ok=True)
    return resolved


def derive_seed(seed: int, *keys: int) -> int:
    """
    Derive an independent 63-bit seed from a root seed and a key path.

    The same (seed, keys) always gives the same child; different key paths
    give statistically independent streams (numpy SeedSequence spawning).
    """
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in keys))
    state = sequence.generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)


def make_generator(seed: int) -> torch.Generator:
    """Create a CPU torch.Generator seeded deterministically."""
    generator = torch.Generator(device="cpu")
    generator.manual_seed(int(seed))
    return generator


def env_int(name: str, default: int, minimum: int = 1) -> int:
    """
    Read a positive integer knob from the environment.

    Raises:
        ConfigError: If the variable is set but not an integer >= minimum
    """
    raw = os.environ.get(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"expected an integer, got {raw!r}", name) from None
    if value < minimum:
        raise ConfigError(f"must be >= {minimum}, got {value}", name)
    return value


def format_value(value: Any) -> str:
    """Format a CSV cell; floats use repr so files round-trip bit-exactly."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if value is None:
        return ""
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """
    Write rows to a CSV file with a fixed header.

    Args:
        path: Destination file
        header: Column names
        rows: Row sequences, same length as header

    Returns:
        The written path
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"Row has {len(row)} cells, header has {len(header)}")
            writer.writerow([format_value(cell) for cell in row])
    return path


def read_csv(path: Path) -> list[dict[str, str]]:
    """Read a CSV file written by write_csv into a list of dicts."""
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))
