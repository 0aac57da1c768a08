"""
Display Module - Rich tables for subcommand summaries.

Each builder returns a Table; main.py decides where to print it.
"""

import math
from typing import Iterable, Sequence

from rich.table import Table
from rich.text import Text

from ..config.theme import Color, Emoji
from ..core.evalsuite import MetricsRecord
from ..core.gradcheck import CheckResult
from ..core.posterior_toys import TraceRecord
from ..core.recovery import RecoveryRow
from ..core.registry import ManifestStatus, RunManifest


def fmt(value: float, digits: int = 4) -> str:
    """Compact number; NaN shows as a dash."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    return f"{value:.{digits}g}"


def status_text(passed: bool) -> Text:
    if passed:
        return Text(f"{Emoji.CHECK} pass", style=Color.SUCCESS)
    return Text(f"{Emoji.ERROR} FAIL", style=f"bold {Color.ERROR}")


def recovery_table(rows: Sequence[RecoveryRow]) -> Table:
    table = Table(show_header=True, header_style=Color.TITLE, title=f"{Emoji.MICROSCOPE} Parameter recovery")
    table.add_column("theta*", justify="right", style=Color.NUMBER)
    table.add_column("method")
    table.add_column("theta_hat", justify="right")
    table.add_column("phi_hat", justify="right")
    table.add_column("bias", justify="right")
    table.add_column("converged")
    for row in rows:
        bias_style = Color.WARNING if abs(row.bias) > 1e-3 else Color.DIM
        table.add_row(
            fmt(row.theta_star, 3),
            row.method.value,
            fmt(row.theta_hat, 6),
            fmt(row.phi_hat, 6),
            Text(fmt(row.bias, 3), style=bias_style),
            status_text(row.converged),
        )
    return table


def gradcheck_table(results: Iterable[CheckResult]) -> Table:
    table = Table(show_header=True, header_style=Color.TITLE, title=f"{Emoji.GEAR} Oracle checks")
    table.add_column("Check")
    table.add_column("Result")
    table.add_column("Detail", style=Color.DIM)
    table.add_column("s", justify="right", style=Color.DIM)
    for result in results:
        table.add_row(result.name, status_text(result.passed), result.detail, f"{result.seconds:.2f}")
    return table


def metrics_table(records: Sequence[MetricsRecord]) -> Table:
    table = Table(show_header=True, header_style=Color.TITLE, title=f"{Emoji.CHART} Test metrics")
    for column in ("step", "nll", "fd", "mmd", "post fd", "recon mse", "-elbo"):
        table.add_column(column, justify="right")
    for r in records:
        cells = [
            str(r.step),
            f"{fmt(r.nll)} ± {fmt(r.nll_se, 2)}",
            f"{fmt(r.marginal_fd_score)} ± {fmt(r.marginal_fd_se, 2)}",
            fmt(r.latent_mmd),
            fmt(r.posterior_fd),
            fmt(r.recon_mse),
            fmt(r.neg_elbo),
        ]
        style = Color.ERROR if r.diverged else None
        table.add_row(*cells, style=style)
    return table


def traces_table(summaries: Sequence[tuple[str, Sequence[TraceRecord]]]) -> Table:
    """One row per (likelihood, inference, optimizer) group."""
    table = Table(show_header=True, header_style=Color.TITLE, title=f"{Emoji.MICROSCOPE} Posterior traces")
    table.add_column("likelihood")
    table.add_column("inference")
    table.add_column("optimizer")
    table.add_column("traces", justify="right")
    table.add_column("at origin", justify="right")
    table.add_column("diverged", justify="right")
    for likelihood, records in summaries:
        if not records:
            continue
        at_origin = sum(1 for r in records if math.hypot(*r.final_mean) < 0.2)
        diverged = sum(1 for r in records if r.diverged)
        first = records[0]
        table.add_row(
            likelihood, first.inference.value, first.optimizer.value,
            str(len(records)), str(at_origin), str(diverged),
        )
    return table


def runs_table(manifests: Sequence[RunManifest]) -> Table:
    table = Table(show_header=True, header_style=Color.TITLE, title=f"{Emoji.SCROLL} Registered runs")
    table.add_column("run id", style=Color.DIM)
    table.add_column("subcommand")
    table.add_column("status")
    table.add_column("seed", justify="right")
    table.add_column("started")
    table.add_column("out dir", style=Color.STRING)
    styles = {
        ManifestStatus.COMPLETED: Color.SUCCESS,
        ManifestStatus.RUNNING: Color.INFO,
        ManifestStatus.DIVERGED: Color.WARNING,
        ManifestStatus.FAILED: Color.ERROR,
    }
    for m in manifests:
        table.add_row(
            m.run_id,
            m.subcommand,
            Text(m.status.value, style=styles[m.status]),
            "" if m.seed is None else str(m.seed),
            m.started_at[:19],
            m.out_dir,
        )
    return table
