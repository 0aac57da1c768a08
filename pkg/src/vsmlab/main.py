"""
vsmlab - desk-scale variational score-matching lab

Subcommands:
- recover    closed-form parameter recovery on the linear-Gaussian toy
- traces     diagonal-Gaussian fits to 2D toy posteriors
- gmm        Gaussian-mixture fits by biased Fisher divergence
- train      one Gaussian-VAE training run
- eval       re-evaluate a trained model
- gradcheck  finite-difference and closed-form oracle suite
- sweep      objectives x inference x J x K x seeds
- sample     dump a synthetic dataset
- runs       list the run registry

Exit codes: 0 success, 2 config error, 3 numerical divergence, 4 failed checks.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Optional

import torch
import typer
from pydantic import ValidationError
from rich.console import Console

from .cli.display import gradcheck_table, metrics_table, recovery_table, runs_table, traces_table
from .config import defaults
from .config.schemas import (
    EvalConfig,
    GmmConfig,
    GradcheckConfig,
    RecoverConfig,
    SampleConfig,
    SweepConfig,
    TracesConfig,
    TrainConfig,
    load_config,
)
from .config.theme import Color, Emoji
from .core.evalsuite import METRIC_COLUMNS
from .core.gradcheck import require_all, run_gradchecks
from .core.persistence import TRACE_SUMMARY_COLUMNS, RunPersistence
from .core.posterior_toys import (
    ToyPosteriorSpec,
    default_init_grid,
    gmm_fd_fit,
    toy_posterior_trace,
)
from .core.recovery import recovery_table as run_recovery
from .core.registry import REGISTRY_NAME, ManifestStatus, ManifestWriter, RunRegistry
from .core.synthdata import dump_dataset_csv, heldout_batch, sample_dataset
from .core.trainer import RunStatus, evaluate, train_run
from .errors import AcceptanceError, ConfigError, DivergenceError
from .logging import configure_root_logger, get_file_logger, get_logger
from .utils import env_int, resolve_output_dir, write_csv

app = typer.Typer(
    name="vsmlab",
    help="vsmlab - variational score-matching lab for Gaussian VAEs",
    add_completion=False,
)

console = Console()
logger = get_logger(__name__)

CONFIG_HELP = "JSON config file (defaults apply when omitted)"
OUT_HELP = "Output directory (default: ./vsmlab_<subcommand>)"
SEED_HELP = "Override the config seed"
FORCE_HELP = "Overwrite an output directory that already holds a run"
VERBOSE_HELP = "Debug logging"

SWEEP_COLUMNS = [
    "objective", "inference", "J", "K", "seed", "status",
    "nll", "nll_se", "fd", "mmd", "post_fd", "recon_mse", "neg_elbo",
]
GMM_SUMMARY_COLUMNS = [
    "likelihood", "seed", "fd_estimate", "last_batch_loss", "top_weight", "top_mean_1", "top_mean_2",
]
GRADCHECK_COLUMNS = ["check", "passed", "detail", "seconds"]


# ============================================================================
# 1. Shared plumbing
# ============================================================================

def _execute(body: Callable[[], None]) -> None:
    """Run a command body and map failures onto exit codes."""
    try:
        body()
    except ValidationError as e:
        console.print(f"[bold red]{Emoji.ERROR} Invalid config[/bold red]")
        for error in e.errors():
            path = ".".join(str(part) for part in error["loc"]) or "<root>"
            console.print(f"  [red]{path}: {error['msg']}[/red]")
        raise typer.Exit(2)
    except ConfigError as e:
        console.print(f"[bold red]{Emoji.ERROR} {e}[/bold red]")
        raise typer.Exit(2)
    except DivergenceError as e:
        console.print(f"[bold red]{Emoji.ERROR} Numerical divergence: {e}[/bold red]")
        raise typer.Exit(3)
    except AcceptanceError as e:
        console.print(f"[bold red]{Emoji.ERROR} {e}[/bold red]")
        raise typer.Exit(4)


def _configure_torch_threads() -> None:
    threads = env_int(defaults.ENV_TORCH_THREADS, 0)
    if threads > 0:
        torch.set_num_threads(threads)


@contextmanager
def _run(subcommand: str, out: Optional[str], force: bool, config_path: Optional[Path], seed, verbose: bool):
    """
    Output directory, manifest and run log for one subcommand.

    The manifest is finalized as completed, diverged or failed depending on
    how the body exits.
    """
    configure_root_logger(logging.DEBUG if verbose else logging.INFO)
    _configure_torch_threads()
    out_dir = resolve_output_dir(out, f"vsmlab_{subcommand}", force)
    writer = ManifestWriter.begin(subcommand, out_dir, config_path, seed)
    logger.debug(f"{subcommand}: writing to {out_dir}")
    run_log = get_file_logger("cli", out_dir / "run.log")
    run_log.info(f"{subcommand} started (run {writer.manifest.run_id}, seed {seed})")
    try:
        yield out_dir, writer
    except DivergenceError as e:
        run_log.error(f"Diverged: {e}")
        writer.finalize(ManifestStatus.DIVERGED)
        raise
    except BaseException as e:
        run_log.error(f"Failed: {type(e).__name__}: {e}")
        writer.finalize(ManifestStatus.FAILED)
        raise
    else:
        writer.add_output(out_dir / "run.log")
        writer.finalize(ManifestStatus.COMPLETED)
        run_log.info(f"{subcommand} completed; outputs: {', '.join(writer.manifest.outputs)}")
        console.print(f"[{Color.SUCCESS}]{Emoji.CHECK} {subcommand} complete[/{Color.SUCCESS}] -> {out_dir}")


# ============================================================================
# 2. Toy studies
# ============================================================================

@app.command()
def recover(
    config: Optional[Path] = typer.Option(None, "--config", "-c", help=CONFIG_HELP),
    out: Optional[str] = typer.Option(None, "--out", "-o", help=OUT_HELP),
    seed: Optional[int] = typer.Option(None, "--seed", help=SEED_HELP),
    force: bool = typer.Option(False, "--force", help=FORCE_HELP),
    verbose: bool = typer.Option(False, "--verbose", "-v", help=VERBOSE_HELP),
):
    """
    Minimize closed-form joint KL and joint FD over (theta, phi) for each theta*.
    """
    def body():
        cfg = load_config(RecoverConfig, config)
        if seed is not None:
            cfg = cfg.model_copy(update={"seed": seed})
        with _run("recover", out, force, config, cfg.seed, verbose) as (out_dir, writer):
            rows = run_recovery(cfg.theta_stars, cfg.alpha, cfg.gamma, cfg.n_starts, cfg.grid_points, cfg.seed)
            writer.add_output(RunPersistence.save_recovery_csv(rows, out_dir / "recovery.csv"))
            console.print(recovery_table(rows))

    _execute(body)


@app.command()
def traces(
    config: Optional[Path] = typer.Option(None, "--config", "-c", help=CONFIG_HELP),
    out: Optional[str] = typer.Option(None, "--out", "-o", help=OUT_HELP),
    seed: Optional[int] = typer.Option(None, "--seed", help=SEED_HELP),
    force: bool = typer.Option(False, "--force", help=FORCE_HELP),
    verbose: bool = typer.Option(False, "--verbose", "-v", help=VERBOSE_HELP),
):
    """
    Fit diagonal Gaussians to the 2D toy posteriors from a grid of initial means.
    """
    def body():
        cfg = load_config(TracesConfig, config)
        if seed is not None:
            cfg = cfg.model_copy(update={"seed": seed})
        with _run("traces", out, force, config, cfg.seed, verbose) as (out_dir, writer):
            grid = default_init_grid(cfg.grid_extent, cfg.grid_points)
            summary_rows = []
            groups = []
            for likelihood in cfg.likelihoods:
                target = ToyPosteriorSpec.default(likelihood)
                for inference in cfg.inferences:
                    for optimizer in cfg.optimizers:
                        records = toy_posterior_trace(
                            target, grid, inference, optimizer, cfg.steps, cfg.step_size,
                            cfg.n_samples, cfg.seed, cfg.init_sd, cfg.grad_tol,
                        )
                        group = f"{likelihood.value}_{inference.value}_{optimizer.value}"
                        for record in records:
                            path = out_dir / "traces" / group / f"init_{record.index:02d}.csv"
                            writer.add_output(RunPersistence.save_trace_csv(record, path))
                            summary_rows.append(RunPersistence.trace_summary_row(likelihood.value, record))
                        groups.append((likelihood.value, records))
            writer.add_output(write_csv(out_dir / "traces_summary.csv", TRACE_SUMMARY_COLUMNS, summary_rows))
            console.print(traces_table(groups))

    _execute(body)


@app.command()
def gmm(
    config: Optional[Path] = typer.Option(None, "--config", "-c", help=CONFIG_HELP),
    out: Optional[str] = typer.Option(None, "--out", "-o", help=OUT_HELP),
    seed: Optional[int] = typer.Option(None, "--seed", help="Fit a single seed instead of the config's list"),
    force: bool = typer.Option(False, "--force", help=FORCE_HELP),
    verbose: bool = typer.Option(False, "--verbose", "-v", help=VERBOSE_HELP),
):
    """
    Fit Gaussian mixtures to the toy posteriors by biased Fisher divergence.
    """
    def body():
        cfg = load_config(GmmConfig, config)
        if seed is not None:
            cfg = cfg.model_copy(update={"seeds": [seed]})
        with _run("gmm", out, force, config, cfg.seeds[0] if cfg.seeds else None, verbose) as (out_dir, writer):
            summary = []
            for likelihood in cfg.likelihoods:
                target = ToyPosteriorSpec.default(likelihood)
                for fit_seed in cfg.seeds:
                    fit = gmm_fd_fit(
                        target, cfg.components, cfg.steps, cfg.step_size, cfg.samples_per_iter, fit_seed,
                        cfg.fd_samples,
                    )
                    stem = out_dir / "gmm" / f"{likelihood.value}_seed{fit_seed}"
                    RunPersistence.save_mixture(fit, stem.with_suffix(".json"))
                    writer.add_output(stem.with_suffix(".json"))
                    writer.add_output(RunPersistence.save_loss_csv(fit, stem.parent / f"{stem.name}_loss.csv"))
                    top = int(fit.weights.argmax())
                    summary.append([
                        likelihood.value, fit_seed,
                        fit.fd_estimate if fit.fd_estimate is not None else float("nan"),
                        fit.loss_trace[-1] if fit.loss_trace else float("nan"),
                        fit.top_weight, float(fit.means[top][0]), float(fit.means[top][1]),
                    ])
                    console.print(
                        f"{Emoji.CHART} {likelihood.value} seed {fit_seed}: "
                        f"top weight {fit.top_weight:.3f} at {fit.means[top].round(3).tolist()}"
                    )
            writer.add_output(write_csv(out_dir / "gmm_summary.csv", GMM_SUMMARY_COLUMNS, summary))

    _execute(body)


# ============================================================================
# 3. Training and evaluation
# ============================================================================

def _save_training_outputs(log, out_dir: Path, writer: ManifestWriter) -> None:
    config_path = out_dir / "config.json"
    RunPersistence.save_config(log.config, config_path)
    writer.add_output(config_path)
    RunPersistence.save_run_log(log, out_dir / "run_log.json")
    writer.add_output(out_dir / "run_log.json")
    RunPersistence.save_model(log.final_model.to_model(), out_dir / "model.json")
    writer.add_output(out_dir / "model.json")
    writer.add_output(RunPersistence.save_metrics_csv(log.records, out_dir / "metrics.csv"))
    if log.final_record is not None:
        writer.add_output(RunPersistence.save_histogram_csv(log.final_record, out_dir / "sd_histogram.csv"))


@app.command()
def train(
    config: Optional[Path] = typer.Option(None, "--config", "-c", help=CONFIG_HELP),
    out: Optional[str] = typer.Option(None, "--out", "-o", help=OUT_HELP),
    seed: Optional[int] = typer.Option(None, "--seed", help=SEED_HELP),
    force: bool = typer.Option(False, "--force", help=FORCE_HELP),
    verbose: bool = typer.Option(False, "--verbose", "-v", help=VERBOSE_HELP),
):
    """
    Train one Gaussian VAE and write its RunLog, model and metrics.
    """
    def body():
        cfg = load_config(TrainConfig, config)
        if seed is not None:
            cfg = cfg.model_copy(update={"seed": seed})
        with _run("train", out, force, config, cfg.seed, verbose) as (out_dir, writer):
            log = train_run(cfg)
            _save_training_outputs(log, out_dir, writer)
            if log.records:
                console.print(metrics_table(log.records))
            if log.status is RunStatus.DIVERGED:
                raise DivergenceError("training", message=log.divergence or "training diverged")

    _execute(body)


@app.command(name="eval")
def eval_command(
    run_dir: Path = typer.Argument(..., help="Directory written by `vsmlab train`"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help=CONFIG_HELP),
    out: Optional[str] = typer.Option(None, "--out", "-o", help=OUT_HELP),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override the run's seed"),
    force: bool = typer.Option(False, "--force", help=FORCE_HELP),
    verbose: bool = typer.Option(False, "--verbose", "-v", help=VERBOSE_HELP),
):
    """
    Evaluate a dumped model on the run's held-out batch.

    With the run's own seed and settings this reproduces the final record.
    """
    def body():
        cfg = load_config(EvalConfig, config)
        if not (run_dir / "run_log.json").exists() or not (run_dir / "model.json").exists():
            raise ConfigError(f"No run_log.json/model.json in {run_dir}", "run_dir")
        log = RunPersistence.load_run_log(run_dir / "run_log.json")
        model = RunPersistence.load_model(run_dir / "model.json")
        updates = {k: v for k, v in cfg.model_dump().items() if k != "step" and v is not None}
        if seed is not None:
            updates["seed"] = seed
        train_cfg = log.config.model_copy(update=updates)
        step = cfg.step if cfg.step is not None else log.steps_completed
        with _run("eval", out, force, config, train_cfg.seed, verbose) as (out_dir, writer):
            test_x = heldout_batch(train_cfg.dataset, train_cfg.n_test, train_cfg.seed)
            record = evaluate(model, train_cfg, step, test_x)
            writer.add_output(RunPersistence.save_metrics_csv([record], out_dir / "metrics.csv"))
            writer.add_output(RunPersistence.save_histogram_csv(record, out_dir / "sd_histogram.csv"))
            console.print(metrics_table([record]))
            _compare_with_stored(record, run_dir / "metrics.csv")

    _execute(body)


def _compare_with_stored(record, stored_path: Path) -> None:
    """Report how far a re-evaluation lands from the run's own row at the same step."""
    if not stored_path.exists():
        return
    stored = [r for r in RunPersistence.load_metrics_csv(stored_path) if r["step"] == record.step]
    if not stored:
        console.print(f"[{Color.DIM}]{Emoji.INFO} No stored metrics at step {record.step}[/{Color.DIM}]")
        return
    fresh = dict(zip(METRIC_COLUMNS, record.csv_row()))
    gap = max(abs(fresh[key] - stored[-1][key]) for key in METRIC_COLUMNS if key != "step")
    logger.info(f"Largest difference from stored metrics at step {record.step}: {gap:.3g}")
    console.print(f"{Emoji.SCROLL} Stored step {record.step}: largest metric difference {gap:.3g}")


def _sweep_member(payload: tuple[int, str, str]) -> list:
    """Train one sweep member in its own directory; returns its sweep.csv row."""
    index, config_json, out_dir = payload
    cfg = TrainConfig.model_validate_json(config_json)
    member_dir = Path(out_dir) / "runs" / f"{index:04d}"
    log = train_run(cfg)
    RunPersistence.save_config(cfg, member_dir / "config.json")
    RunPersistence.save_run_log(log, member_dir / "run_log.json")
    RunPersistence.save_metrics_csv(log.records, member_dir / "metrics.csv")
    final = log.final_record
    metrics = (
        [final.nll, final.nll_se, final.marginal_fd_score, final.latent_mmd,
         final.posterior_fd, final.recon_mse, final.neg_elbo]
        if final is not None else [float("nan")] * 7
    )
    return [cfg.objective.value, cfg.inference.value, cfg.J, cfg.K, cfg.seed, log.status.value, *metrics]


@app.command()
def sweep(
    config: Path = typer.Option(..., "--config", "-c", help="Sweep JSON (base TrainConfig plus axes)"),
    out: Optional[str] = typer.Option(None, "--out", "-o", help=OUT_HELP),
    seed: Optional[int] = typer.Option(None, "--seed", help="Run a single seed instead of the config's list"),
    force: bool = typer.Option(False, "--force", help=FORCE_HELP),
    verbose: bool = typer.Option(False, "--verbose", "-v", help=VERBOSE_HELP),
):
    """
    Train every (objective, inference, J, K, seed) combination.

    Worker processes are capped by VSM_THREADS (default 1). Diverged members
    are recorded in sweep.csv and do not stop the sweep.
    """
    def body():
        cfg = load_config(SweepConfig, config)
        if seed is not None:
            cfg = cfg.model_copy(update={"seeds": [seed]})
        members = cfg.expand()
        workers = env_int(defaults.ENV_THREADS, 1)
        with _run("sweep", out, force, config, cfg.seeds[0] if cfg.seeds else None, verbose) as (out_dir, writer):
            payloads = [(i, m.model_dump_json(), str(out_dir)) for i, m in enumerate(members)]
            console.print(f"{Emoji.GEAR} {len(members)} runs on {workers} worker(s)")
            if workers == 1:
                rows = [_sweep_member(p) for p in payloads]
            else:
                with ProcessPoolExecutor(max_workers=workers) as pool:
                    rows = list(pool.map(_sweep_member, payloads))
            for i in range(len(members)):
                for name in ("config.json", "run_log.json", "metrics.csv"):
                    writer.add_output(out_dir / "runs" / f"{i:04d}" / name)
            writer.add_output(write_csv(out_dir / "sweep.csv", SWEEP_COLUMNS, rows))
            diverged = sum(1 for r in rows if r[5] == RunStatus.DIVERGED.value)
            if diverged:
                console.print(f"[{Color.WARNING}]{Emoji.WARNING} {diverged} run(s) diverged[/{Color.WARNING}]")

    _execute(body)


# ============================================================================
# 4. Checks, data and registry
# ============================================================================

@app.command()
def gradcheck(
    config: Optional[Path] = typer.Option(None, "--config", "-c", help=CONFIG_HELP),
    out: Optional[str] = typer.Option(None, "--out", "-o", help=OUT_HELP),
    seed: Optional[int] = typer.Option(None, "--seed", help=SEED_HELP),
    force: bool = typer.Option(False, "--force", help=FORCE_HELP),
    verbose: bool = typer.Option(False, "--verbose", "-v", help=VERBOSE_HELP),
):
    """
    Run the finite-difference and closed-form oracle suite (exit 4 on any failure).
    """
    def body():
        cfg = load_config(GradcheckConfig, config)
        if seed is not None:
            cfg = cfg.model_copy(update={"seed": seed})
        with _run("gradcheck", out, force, config, cfg.seed, verbose) as (out_dir, writer):
            results = run_gradchecks(cfg.n_networks, cfg.rel_tol, cfg.seed)
            rows = [[r.name, r.passed, r.detail, r.seconds] for r in results]
            writer.add_output(write_csv(out_dir / "gradcheck.csv", GRADCHECK_COLUMNS, rows))
            console.print(gradcheck_table(results))
            require_all(results)

    _execute(body)


@app.command()
def sample(
    config: Optional[Path] = typer.Option(None, "--config", "-c", help=CONFIG_HELP),
    out: Optional[str] = typer.Option(None, "--out", "-o", help=OUT_HELP),
    seed: int = typer.Option(0, "--seed", help="Sampling seed"),
    force: bool = typer.Option(False, "--force", help=FORCE_HELP),
    verbose: bool = typer.Option(False, "--verbose", "-v", help=VERBOSE_HELP),
):
    """
    Write n points of a synthetic dataset to samples.csv.
    """
    def body():
        cfg = load_config(SampleConfig, config)
        with _run("sample", out, force, config, seed, verbose) as (out_dir, writer):
            points = sample_dataset(cfg.dataset, cfg.n, seed)
            writer.add_output(dump_dataset_csv(points, out_dir / "samples.csv"))

    _execute(body)


@app.command()
def runs(
    root: Optional[Path] = typer.Option(None, "--root", "-r", help="Directory holding registry.json (default: cwd)"),
    subcommand: Optional[str] = typer.Option(None, "--subcommand", "-s", help="Only this subcommand"),
):
    """
    List registered runs.
    """
    registry = RunRegistry((root or Path.cwd()) / REGISTRY_NAME)
    manifests = registry.list_runs(subcommand)
    if not manifests:
        console.print(f"[{Color.DIM}]{Emoji.INFO} No runs registered under {registry.path}[/{Color.DIM}]")
        return
    console.print(runs_table(manifests))


def main():
    """Entry point for the vsmlab CLI."""
    app()


if __name__ == "__main__":
    main()
