"""Command-line interface for geos."""

from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Any

import typer
from rich.console import Console
from rich.markup import escape
from rich.panel import Panel
from rich.table import Table

from harness.context import format_context_info, get_run_context
from lib.api import GeosLab
from lib.config import get_settings, load_train_config
from lib.errors import DIVERGENCE_EXIT_CODE, USAGE_EXIT_CODE, GeosError, exit_code_for
from lib.evalproto import select_pairs
from lib.logs import configure_logging
from lib.models import (
    Method,
    OSConfig,
    ProtocolName,
    ProtocolResult,
    ProtocolSpec,
    SynthSpec,
    TrainConfig,
)
from lib.osadapt import IterationSweep

app = typer.Typer(
    name="geos",
    help="Gradient-isolated auxiliary self-supervision: train, adapt and evaluate.",
    add_completion=False,
)

console = Console()


def get_lab(out_dir: Path | None = None) -> GeosLab:
    """Get the geos API object writing under ``out_dir``."""
    return GeosLab(out_dir=out_dir)


@contextmanager
def _exit_on_error() -> Iterator[None]:
    """Turn library errors into a one-line reason and the matching exit code."""
    try:
        yield
    except GeosError as e:
        console.print(f"[red]✗[/red] {escape(str(e))}")
        raise typer.Exit(exit_code_for(e)) from e


@app.callback()
def main(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging"),
) -> None:
    """Configure logging for every command."""
    configure_logging("DEBUG" if verbose else get_settings().log_level)


def _train_overrides(**flags: Any) -> dict[str, Any]:  # noqa: ANN401
    return {key: value for key, value in flags.items() if value is not None}


def _print_config(config: TrainConfig) -> None:
    table = Table(title="Resolved training config", show_header=True, header_style="bold magenta")
    table.add_column("Key", style="cyan")
    table.add_column("Value", style="green")
    for key in (
        "mode",
        "task",
        "alpha",
        "optimizer",
        "lr_main",
        "lr_head",
        "momentum",
        "weight_decay",
        "epochs",
        "batch_size_primary",
        "batch_size_auxiliary",
        "backbone",
        "resolution",
        "seed",
    ):
        table.add_row(key, str(getattr(config, key)))
    console.print(table)


def _print_sweep(sweep: IterationSweep, title: str) -> None:
    table = Table(title=title, show_header=True, header_style="bold magenta")
    table.add_column("Iterations", justify="right", style="cyan")
    table.add_column("Accuracy", justify="right", style="green")
    for k, accuracy in enumerate(sweep.accuracies()):
        table.add_row(str(k), f"{accuracy:.4f}")
    console.print(table)


def _print_result(result: ProtocolResult) -> None:
    table = Table(title=f"{result.protocol} results", show_header=True, header_style="bold magenta")
    table.add_column("Method", style="cyan")
    table.add_column("Targets", justify="right", style="dim")
    table.add_column("Avg", justify="right", style="green")
    for aggregate in result.aggregate():
        table.add_row(aggregate.label, str(len(aggregate.per_target)), f"{aggregate.average:.4f}")
    console.print(table)
    if result.failed:
        count = sum(row.status == "failed" for row in result.rows)
        console.print(f"[yellow]{count} row(s) failed; see the log for the cause.[/yellow]")


@app.command()
def permgen(
    tiles: int = typer.Option(9, "--tiles", help="Number of jigsaw tiles n"),
    count: int = typer.Option(30, "--count", help="Number of permutations V"),
    seed: int = typer.Option(0, "--seed", help="Random seed"),
    out: Path = typer.Option(Path("perms.txt"), "--out", "-o", help="Permutation-set file"),
) -> None:
    """Generate a maximal-Hamming permutation set."""
    lab = get_lab(out.parent)
    with _exit_on_error():
        lab.start_run(
            "permgen",
            seed,
            options={"tiles": tiles, "count": count, "seed": seed, "out": out},
            context=get_run_context(),
        )
        perm_set = lab.permgen(tiles, count, seed, out)

    console.print(f"[green]✓[/green] Wrote {perm_set.size} permutations of {tiles} tiles")
    console.print(f"[dim]{out}[/dim]")
    console.print(f"min pairwise Hamming distance: {perm_set.min_pairwise_hamming}")
    lab.close()


@app.command()
def synth(
    out: Path = typer.Option(..., "--out", "-o", help="Directory to write the dataset to"),
    domains: int = typer.Option(4, "--domains", help="Number of domains"),
    classes: int = typer.Option(7, "--classes", help="Number of shape classes (at most 7)"),
    per_class: int = typer.Option(50, "--per-class", help="Images per domain and class"),
    resolution: int = typer.Option(66, "--resolution", help="Image side in pixels"),
    seed: int = typer.Option(7, "--seed", help="Random seed"),
) -> None:
    """Render a synthetic multi-domain shapes dataset in the folder layout."""
    lab = get_lab(out)
    with _exit_on_error():
        try:
            spec = SynthSpec(
                num_domains=domains,
                num_classes=classes,
                samples_per_domain_class=per_class,
                resolution=resolution,
                seed=seed,
            )
        except ValueError as e:
            console.print(f"[red]✗[/red] {escape(str(e))}")
            raise typer.Exit(USAGE_EXIT_CODE) from e
        lab.start_run("synth", seed, config=spec, context=get_run_context())
        dataset = lab.synthesize(spec, export=True)

    console.print(
        f"[green]✓[/green] {len(dataset)} images in {len(dataset.domains)} domains "
        f"written to {out}"
    )
    lab.close()


@app.command()
def train(
    config: Path | None = typer.Option(None, "--config", "-c", help="Flat key=value config file"),
    preset: str | None = typer.Option(None, "--preset", help="Published hyperparameter profile"),
    mode: str | None = typer.Option(None, "--mode", help="dg, da, pda or null_hypothesis"),
    target: str | None = typer.Option(None, "--target", help="Held-out target domain"),
    source: str | None = typer.Option(None, "--source", help="Labeled source domain (pda)"),
    perms: Path | None = typer.Option(None, "--perms", help="Permutation-set file"),
    data: Path | None = typer.Option(None, "--data", help="Dataset root (or GEOS_DATA_ROOT)"),
    manifest: Path | None = typer.Option(None, "--manifest", help="CSV selecting images"),
    out: Path = typer.Option(Path("runs/train"), "--out", "-o", help="Output directory"),
    task: str | None = typer.Option(None, "--task", help="jigsaw or rotation"),
    epochs: int | None = typer.Option(None, "--epochs", help="Training epochs"),
    alpha: float | None = typer.Option(None, "--alpha", help="Auxiliary loss weight"),
    seed: int | None = typer.Option(None, "--seed", help="Root seed"),
    backbone: str | None = typer.Option(None, "--backbone", help="desk_cnn or resnet18"),
    resolution: int | None = typer.Option(None, "--resolution", help="Input side in pixels"),
    workers: int | None = typer.Option(None, "--workers", help="Auxiliary batch prefetch threads"),
) -> None:
    """Train a network and write its checkpoint and epoch log."""
    lab = get_lab(out)
    with _exit_on_error():
        train_config = load_train_config(
            config,
            preset,
            _train_overrides(
                mode=mode,
                task=task,
                epochs=epochs,
                alpha=alpha,
                seed=seed,
                backbone=backbone,
                resolution=resolution,
                loader_workers=workers,
            ),
        )
        lab.start_run(
            "train",
            train_config.seed,
            options={"preset": preset, "target": target, "source": source, "data": data},
            config=train_config,
            inputs=[p for p in (config, perms, data, manifest) if p is not None],
            context=get_run_context(),
        )
        _print_config(train_config)
        dataset = lab.load_data(data, train_config.resolution, manifest)
        outcome = lab.train(train_config, dataset, target=target, source=source, perms=perms)

    console.print(
        Panel(
            f"best epoch {outcome.metadata.best_epoch} "
            f"(validation {outcome.metadata.best_val_metric:.4f})\n"
            f"checkpoint: {outcome.checkpoint}\nlog: {outcome.log}",
            title="[bold green]Training finished[/bold green]",
            border_style="green",
        )
    )
    lab.close()


@app.command(name="eval")
def evaluate(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Checkpoint archive"),
    data: Path | None = typer.Option(None, "--data", help="Dataset root (or GEOS_DATA_ROOT)"),
    manifest: Path | None = typer.Option(None, "--manifest", help="CSV selecting images"),
    target: str | None = typer.Option(None, "--target", help="Domain to test on"),
    os_iterations: int = typer.Option(3, "--os-iterations", help="Adaptation steps per sample"),
    os_batch: int = typer.Option(128, "--os-batch", help="Variants per adaptation step"),
    resolution: int | None = typer.Option(None, "--resolution", help="Default: the checkpoint's"),
    trace: bool = typer.Option(False, "--trace", help="Write the per-sample trace CSV"),
    seed: int = typer.Option(0, "--seed", help="Adaptation seed"),
    jobs: int | None = typer.Option(None, "--jobs", help="Parallel adaptation workers"),
    out: Path = typer.Option(Path("runs/eval"), "--out", "-o", help="Output directory"),
) -> None:
    """Accuracy with one-sample adaptation for 0..N iterations."""
    lab = get_lab(out)
    with _exit_on_error():
        os_config = OSConfig(
            iterations=os_iterations,
            batch_size=os_batch,
            seed=seed,
            jobs=jobs or get_settings().jobs,
        )
        lab.start_run(
            "eval",
            seed,
            options={"checkpoint": checkpoint, "target": target, "trace": trace, "data": data},
            config=os_config,
            inputs=[p for p in (checkpoint, data, manifest) if p is not None],
            context=get_run_context(),
        )
        loaded = lab.load_checkpoint(checkpoint)
        dataset = lab.load_data(
            data, resolution or loaded.metadata.network.input_size, manifest
        )
        outcome = lab.evaluate(checkpoint, dataset, os_config, target=target, trace=trace)

    _print_sweep(outcome.sweep, f"Accuracy on {outcome.target or 'all domains'}")
    if outcome.trace is not None:
        console.print(f"[dim]trace: {outcome.trace}[/dim]")
    lab.close()


@app.command()
def protocol(
    name: str = typer.Option(..., "--protocol", help="dg_loo, da_multi or pda_pairs"),
    config: Path | None = typer.Option(None, "--config", "-c", help="Flat key=value config file"),
    preset: str | None = typer.Option(None, "--preset", help="Published hyperparameter profile"),
    reps: int = typer.Option(3, "--reps", help="Repetitions per target"),
    methods: list[str] | None = typer.Option(
        None, "--method", "-m", help="Methods to run (can be used multiple times)"
    ),
    os_iterations: int = typer.Option(3, "--os-iterations", help="Max adaptation steps"),
    rotation_iterations: int = typer.Option(1, "--rotation-iterations", help="Steps for rotation"),
    os_batch: int = typer.Option(128, "--os-batch", help="Variants per adaptation step"),
    full_sweep: bool = typer.Option(False, "--full-sweep", help="Run every pda domain pair"),
    max_pairs: int = typer.Option(6, "--max-pairs", help="Pairs kept without --full-sweep"),
    target: str | None = typer.Option(None, "--target", help="Single da_multi target"),
    perms: Path | None = typer.Option(None, "--perms", help="Permutation-set file"),
    data: Path | None = typer.Option(None, "--data", help="Dataset root (or GEOS_DATA_ROOT)"),
    manifest: Path | None = typer.Option(None, "--manifest", help="CSV selecting images"),
    seed: int = typer.Option(0, "--seed", help="Root seed"),
    jobs: int | None = typer.Option(None, "--jobs", help="Parallel protocol cells"),
    fmt: str = typer.Option("md", "--format", help="csv, or md for markdown as well"),
    gains: bool = typer.Option(False, "--gains", help="Also write the iteration-gain table"),
    with_references: bool = typer.Option(False, "--with-references", help="Add published rows"),
    out: Path = typer.Option(Path("runs/protocol"), "--out", "-o", help="Output directory"),
) -> None:
    """Run a full evaluation protocol and write result.csv and result.md."""
    lab = get_lab(out)
    with _exit_on_error():
        train_config = load_train_config(config, preset)
        try:
            spec = ProtocolSpec(
                protocol=_as_protocol(name),
                repetitions=reps,
                methods=_as_methods(methods or ["ges", "geos"]),
                os_max_iterations=os_iterations,
                rotation_os_iterations=rotation_iterations,
                os_batch_size=os_batch,
                full_sweep=full_sweep,
                max_pairs=max_pairs,
                seed=seed,
                jobs=jobs or get_settings().jobs,
                train=train_config,
            )
        except ValueError as e:
            console.print(f"[red]✗[/red] {escape(str(e))}")
            raise typer.Exit(USAGE_EXIT_CODE) from e
        run_context = get_run_context()
        lab.start_run(
            "protocol",
            seed,
            options={"target": target, "format": fmt, "gains": gains, "data": data},
            config=spec,
            inputs=[p for p in (config, perms, data, manifest) if p is not None],
            context=run_context,
        )
        console.print(f"[dim]{format_context_info(run_context)}[/dim]")
        dataset = lab.load_data(data, train_config.resolution, manifest)
        if spec.protocol == "pda_pairs":
            kept = len(select_pairs(dataset.domain_names, spec))
            console.print(f"[dim]Running {kept} domain pair(s)[/dim]")
        result = lab.run_protocol(spec, dataset, target=target, perms=perms)
        written = lab.report(result, fmt, gains, with_references)

    _print_result(result)
    for path in written:
        console.print(f"[dim]{path}[/dim]")
    lab.close()
    if result.failed:
        raise typer.Exit(DIVERGENCE_EXIT_CODE)


@app.command()
def report(
    result: Path = typer.Option(..., "--result", help="result.csv written by protocol"),
    fmt: str = typer.Option("md", "--format", help="csv, or md for markdown as well"),
    gains: bool = typer.Option(False, "--gains", help="Also write the iteration-gain table"),
    with_references: bool = typer.Option(False, "--with-references", help="Add published rows"),
    out: Path = typer.Option(Path("runs/report"), "--out", "-o", help="Output directory"),
) -> None:
    """Re-render the tables of an earlier protocol run."""
    lab = get_lab(out)
    with _exit_on_error():
        lab.start_run(
            "report",
            0,
            options={"result": result, "format": fmt, "gains": gains},
            inputs=[result],
            context=get_run_context(),
        )
        parsed = lab.load_result(result)
        written = lab.report(parsed, fmt, gains, with_references)

    _print_result(parsed)
    for path in written:
        console.print(f"[dim]{path}[/dim]")
    lab.close()


def _as_protocol(name: str) -> ProtocolName:
    if name not in ("dg_loo", "da_multi", "pda_pairs"):
        msg = f"unknown protocol {name!r}; choose dg_loo, da_multi or pda_pairs"
        raise ValueError(msg)
    return name  # type: ignore[return-value]


def _as_methods(names: list[str]) -> list[Method]:
    allowed = ("null", "ges", "geos", "ges_rotation", "geos_rotation")
    unknown = [name for name in names if name not in allowed]
    if unknown:
        msg = f"unknown method(s) {', '.join(unknown)}; choose from {', '.join(allowed)}"
        raise ValueError(msg)
    return names  # type: ignore[return-value]


if __name__ == "__main__":
    app()
