"""
Persistence Module

Saves and loads run artifacts: RunLog and model JSON, metric and trace CSVs,
mixture fits. JSON goes through the pydantic models on load, so a hand-edited
file gets the same validation as a fresh run.
"""

import json
from pathlib import Path
from typing import Any, Dict, Iterable, Sequence

import numpy as np

from ..utils import read_csv, write_csv
from .evalsuite import HISTOGRAM_COLUMNS, METRIC_COLUMNS, MetricsRecord, histogram_rows
from .gaussmodel import GaussianVae
from .posterior_toys import MixtureFit, TraceRecord
from .recovery import RECOVERY_COLUMNS, RecoveryRow
from .trainer import ModelDump, RunLog

TRACE_COLUMNS = ["step", "mean_1", "mean_2", "log_sd_1", "log_sd_2"]
TRACE_SUMMARY_COLUMNS = [
    "likelihood", "inference", "optimizer", "index", "init_1", "init_2",
    "final_1", "final_2", "final_norm", "steps_run", "converged", "diverged",
]
LOSS_COLUMNS = ["step", "loss"]


def _write_json(data: Dict[str, Any], filepath: Path) -> None:
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, ensure_ascii=False)


def _read_json(filepath: Path) -> Dict[str, Any]:
    with open(filepath, "r", encoding="utf-8") as f:
        return json.load(f)


class RunPersistence:
    """Static save/load helpers for every artifact a subcommand writes."""

    @staticmethod
    def save_run_log(log: RunLog, filepath: Path) -> None:
        """
        Save a RunLog to JSON. Diverged metrics are written as NaN literals.

        Raises:
            IOError: If the file cannot be written
        """
        filepath.parent.mkdir(parents=True, exist_ok=True)
        filepath.write_text(log.model_dump_json(indent=2), encoding="utf-8")

    @staticmethod
    def load_run_log(filepath: Path) -> RunLog:
        """
        Load and validate a RunLog.

        Raises:
            FileNotFoundError: If the file doesn't exist
            pydantic.ValidationError: If the document is not a valid RunLog
        """
        return RunLog.model_validate(_read_json(filepath))

    @staticmethod
    def save_model(model: GaussianVae, filepath: Path) -> None:
        _write_json(ModelDump.from_model(model).model_dump(mode="json"), filepath)

    @staticmethod
    def load_model(filepath: Path) -> GaussianVae:
        return ModelDump.model_validate(_read_json(filepath)).to_model()

    @staticmethod
    def save_metrics_csv(records: Iterable[MetricsRecord], filepath: Path) -> Path:
        return write_csv(filepath, METRIC_COLUMNS, [r.csv_row() for r in records])

    @staticmethod
    def load_metrics_csv(filepath: Path) -> list[Dict[str, float]]:
        """Metric rows as floats (step as int)."""
        rows = []
        for row in read_csv(filepath):
            parsed = {key: float(value) for key, value in row.items()}
            parsed["step"] = int(parsed["step"])
            rows.append(parsed)
        return rows

    @staticmethod
    def save_histogram_csv(record: MetricsRecord, filepath: Path) -> Path:
        return write_csv(filepath, HISTOGRAM_COLUMNS, histogram_rows(record))

    @staticmethod
    def save_recovery_csv(rows: Sequence[RecoveryRow], filepath: Path) -> Path:
        return write_csv(filepath, RECOVERY_COLUMNS, [r.csv_row() for r in rows])

    @staticmethod
    def save_trace_csv(record: TraceRecord, filepath: Path) -> Path:
        """One row per optimizer step of a single trace."""
        rows = [
            [step, mean[0], mean[1], log_sd[0], log_sd[1]]
            for step, (mean, log_sd) in enumerate(zip(record.means, record.log_sds), start=1)
        ]
        return write_csv(filepath, TRACE_COLUMNS, rows)

    @staticmethod
    def trace_summary_row(likelihood: str, record: TraceRecord) -> list:
        final = record.final_mean
        return [
            likelihood, record.inference.value, record.optimizer.value, record.index,
            record.init_mean[0], record.init_mean[1], final[0], final[1],
            float(np.hypot(final[0], final[1])), record.steps_run, record.converged, record.diverged,
        ]

    @staticmethod
    def save_mixture(fit: MixtureFit, filepath: Path) -> None:
        """Mixture parameters as JSON; the loss trace goes to its own CSV."""
        _write_json(
            {
                "seed": fit.seed,
                "weights": np.asarray(fit.weights).tolist(),
                "means": np.asarray(fit.means).tolist(),
                "sds": np.asarray(fit.sds).tolist(),
                "fd_estimate": fit.fd_estimate,
                "last_batch_loss": fit.loss_trace[-1] if fit.loss_trace else None,
            },
            filepath,
        )

    @staticmethod
    def save_loss_csv(fit: MixtureFit, filepath: Path) -> Path:
        return write_csv(filepath, LOSS_COLUMNS, [[step, loss] for step, loss in enumerate(fit.loss_trace)])

    @staticmethod
    def save_config(config, filepath: Path) -> None:
        """Echo a pydantic config next to the outputs."""
        _write_json(config.model_dump(mode="json"), filepath)
