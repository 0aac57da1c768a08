"""
Run manifests and the run registry.

A manifest is written to ``<out>/manifest.json`` with status ``running``
before any work starts and rewritten with the final status and outputs when
the subcommand ends. Every finalized manifest is also recorded in a TinyDB
registry one level above the output directory.
"""

import json
import uuid
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import List, Optional

from pydantic import BaseModel, Field
from tinydb import Query, TinyDB

from .. import __version__
from ..logging import get_logger
from ..utils import MANIFEST_NAME

logger = get_logger(__name__)

REGISTRY_NAME = "registry.json"


class ManifestStatus(str, Enum):
    RUNNING = "running"
    COMPLETED = "completed"
    DIVERGED = "diverged"
    FAILED = "failed"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class RunManifest(BaseModel):
    """Traceability record tying a directory of outputs to its config and seed."""
    run_id: str = Field(default_factory=lambda: uuid.uuid4().hex[:12])
    subcommand: str
    config_path: Optional[str] = Field(None, description="Config file the run was read from")
    out_dir: str
    seed: Optional[int] = None
    tool_version: str = __version__
    started_at: str = Field(default_factory=_now)
    ended_at: Optional[str] = None
    status: ManifestStatus = ManifestStatus.RUNNING
    outputs: List[str] = Field(default_factory=list, description="Files relative to out_dir")


class ManifestWriter:
    """Begin/finalize lifecycle of one run's manifest."""

    def __init__(self, manifest: RunManifest):
        self.manifest = manifest
        self.path = Path(manifest.out_dir) / MANIFEST_NAME

    @classmethod
    def begin(
        cls,
        subcommand: str,
        out_dir: Path,
        config_path: Optional[Path] = None,
        seed: Optional[int] = None,
    ) -> "ManifestWriter":
        writer = cls(
            RunManifest(
                subcommand=subcommand,
                config_path=str(config_path) if config_path else None,
                out_dir=str(out_dir),
                seed=seed,
            )
        )
        writer._write()
        logger.debug(f"Run {writer.manifest.run_id} started: {subcommand} -> {out_dir}")
        return writer

    def add_output(self, path: Path) -> None:
        relative = Path(path).resolve().relative_to(Path(self.manifest.out_dir).resolve())
        if str(relative) not in self.manifest.outputs:
            self.manifest.outputs.append(str(relative))

    def finalize(self, status: ManifestStatus) -> RunManifest:
        self.manifest.status = ManifestStatus(status)
        self.manifest.ended_at = _now()
        self._write()
        try:
            RunRegistry.for_output(Path(self.manifest.out_dir)).record(self.manifest)
        except OSError as e:
            logger.warning(f"Could not update run registry: {e}")
        return self.manifest

    def _write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", encoding="utf-8") as f:
            json.dump(self.manifest.model_dump(mode="json"), f, indent=2)


class RunRegistry:
    """TinyDB index of finalized runs, keyed by run id."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    @classmethod
    def for_output(cls, out_dir: Path) -> "RunRegistry":
        return cls(Path(out_dir).resolve().parent / REGISTRY_NAME)

    def record(self, manifest: RunManifest) -> None:
        with TinyDB(str(self.path)) as db:
            runs = db.table("runs")
            runs.upsert(manifest.model_dump(mode="json"), Query().run_id == manifest.run_id)

    def list_runs(self, subcommand: Optional[str] = None) -> List[RunManifest]:
        """Registered runs ordered by start time."""
        if not self.path.exists():
            return []
        with TinyDB(str(self.path)) as db:
            runs = db.table("runs")
            docs = runs.search(Query().subcommand == subcommand) if subcommand else runs.all()
        manifests = [RunManifest.model_validate(dict(doc)) for doc in docs]
        return sorted(manifests, key=lambda m: m.started_at)


def load_manifest(out_dir: Path) -> RunManifest:
    with open(Path(out_dir) / MANIFEST_NAME, "r", encoding="utf-8") as f:
        return RunManifest.model_validate(json.load(f))
