"""Public API for the geos library."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import UTC, datetime
from pathlib import Path
from typing import Any

from pydantic import BaseModel

from lib import datasets, evalproto, permset
from lib.config import Settings, config_hash
from lib.datasets import DomainDataset
from lib.errors import CheckpointError, UsageError
from lib.models import (
    CheckpointMetadata,
    OSConfig,
    ProtocolResult,
    ProtocolSpec,
    RunManifest,
    SynthSpec,
    TrainConfig,
)
from lib.netcore import GeosModel
from lib.osadapt import IterationSweep, adapt_batch
from lib.permset import PermutationSet
from lib.seeding import derive_seed
from lib.storage import PERMS, LoadedCheckpoint, RunStore, content_hash, load_checkpoint
from lib.trainer import TrainState, fit

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainOutcome:
    """A finished training run and where its files went."""

    state: TrainState
    metadata: CheckpointMetadata
    checkpoint: Path
    log: Path


@dataclass(frozen=True)
class EvalOutcome:
    sweep: IterationSweep
    target: str | None
    trace: Path | None


class GeosLab:
    """High-level API tying data, training, adaptation and protocols together.

    This is the main entry point for using geos as a library; the CLI is a thin
    layer over it.

    Example:
        >>> with GeosLab(out_dir=Path("runs/desk")) as lab:
        ...     data = lab.synthesize(SynthSpec(num_domains=3, samples_per_domain_class=10))
        ...     config = TrainConfig(backbone="desk_cnn", resolution=66, epochs=1)
        ...     outcome = lab.train(config, data, target="synth2")
        >>> outcome.metadata.best_epoch
        1
    """

    def __init__(
        self,
        out_dir: Path | None = None,
        data_root: Path | None = None,
        settings: Settings | None = None,
    ) -> None:
        """Initialize the lab.

        Args:
            out_dir: Directory for every file this lab writes (default: from settings)
            data_root: Dataset root used when a command names none (default: from settings)
            settings: Explicit settings instead of the environment
        """
        self.settings = settings or Settings()
        if out_dir is not None:
            self.settings.out_dir = out_dir
        if data_root is not None:
            self.settings.data_root = data_root
        self.store = RunStore(self.settings.out_dir)
        self._checkpoints: dict[Path, LoadedCheckpoint] = {}

    def close(self) -> None:
        """Drop cached checkpoints."""
        self._checkpoints.clear()

    def __enter__(self) -> GeosLab:
        """Context manager entry."""
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc_val: BaseException | None,
        exc_tb: object | None,
    ) -> None:
        """Context manager exit."""
        self.close()

    def start_run(
        self,
        command: str,
        root_seed: int,
        options: dict[str, Any] | None = None,
        config: BaseModel | None = None,
        inputs: list[Path] | None = None,
        context: dict[str, str | None] | None = None,
    ) -> RunManifest:
        """Write the manifest of a command before it does any work.

        Inputs are recorded by content hash; missing inputs are skipped here and
        reported by the step that reads them.
        """
        resolved = config.model_dump(mode="json") if config is not None else {}
        seeds = {name: derive_seed(root_seed, name) for name in ("init", "split", "perms", "os")}
        manifest = RunManifest(
            command=command,
            created_at=datetime.now(UTC),
            root_seed=root_seed,
            options={k: str(v) if isinstance(v, Path) else v for k, v in (options or {}).items()},
            config={**resolved, "config_hash": config_hash(config)} if config else {},
            seeds=seeds,
            inputs={str(p): content_hash(p) for p in inputs or [] if p.exists()},
            context=context or {},
        )
        self.store.write_manifest(manifest)
        return manifest

    def resolve_data_root(self, data: Path | None) -> Path:
        """Explicit path, else ``GEOS_DATA_ROOT``.

        Raises:
            UsageError: if neither is set
        """
        root = data or self.settings.data_root
        if root is None:
            msg = "no dataset given: pass --data or set GEOS_DATA_ROOT"
            raise UsageError(msg)
        return root

    def load_data(
        self, data: Path | None, resolution: int, manifest: Path | None = None
    ) -> DomainDataset:
        """Ingest a folder tree, or the images a manifest CSV selects under it."""
        root = self.resolve_data_root(data)
        if manifest is not None:
            return datasets.load_manifest(manifest, root, resolution)
        return datasets.load_folder(root, resolution)

    def synthesize(self, spec: SynthSpec, export: bool = False) -> DomainDataset:
        """Render a toy dataset; with ``export`` it is also written under the output dir."""
        dataset = datasets.synthesize(spec)
        if export:
            count = datasets.export_folder(dataset, self.store.out_dir)
            logger.info("Wrote %d synthetic images to %s", count, self.store.out_dir)
        return dataset

    def permgen(self, tiles: int, count: int, seed: int, out: Path | None = None) -> PermutationSet:
        """Generate a permutation set and write it to ``out`` (default: the run's perms.txt)."""
        perm_set = permset.generate(tiles, count, seed)
        permset.save(perm_set, out or self.store.path(PERMS))
        return perm_set

    def _perm_set_for(self, config: TrainConfig, perms: Path | None) -> PermutationSet | None:
        if config.task == "rotation":
            return None
        if perms is not None:
            perm_set = permset.load(perms)
        else:
            perm_set = permset.generate(
                config.grid_side**2, config.num_permutations, derive_seed(config.seed, "perms")
            )
        permset.save(perm_set, self.store.path(PERMS))
        return perm_set

    def train(
        self,
        config: TrainConfig,
        dataset: DomainDataset,
        target: str | None = None,
        source: str | None = None,
        perms: Path | None = None,
    ) -> TrainOutcome:
        """Train per ``config.mode`` and write the checkpoint and epoch log.

        dg and null_hypothesis train on every domain except ``target``; da adds the
        unlabeled ``target`` for the pretext task; pda trains on ``source`` and uses
        every domain except source and target as unlabeled auxiliary data.

        Raises:
            UsageError: if the mode lacks the domains it needs
        """
        domains = dataset.domain_names
        for name in (target, source):
            if name is not None and name not in domains:
                msg = f"unknown domain {name!r}; available: {', '.join(domains)}"
                raise UsageError(msg)
        aux = None
        if config.mode in {"dg", "null_hypothesis"}:
            sources = [d for d in domains if d != target]
        elif config.mode == "da":
            if target is None:
                msg = "--mode da needs --target"
                raise UsageError(msg)
            sources = [d for d in domains if d != target]
            aux = dataset.unlabeled([target])
        else:
            if source is None:
                msg = "--mode pda needs --source"
                raise UsageError(msg)
            sources = [source]
            aux = dataset.unlabeled([d for d in domains if d not in {source, target}])
        if not sources:
            msg = "no source domain left to train on"
            raise UsageError(msg)

        perm_set = self._perm_set_for(config, perms)
        state = fit(config, dataset.subset(sources), aux, perm_set)
        model = state.model
        if not isinstance(model, GeosModel):
            msg = "only networks built from a config can be checkpointed"
            raise CheckpointError(msg)
        metadata = CheckpointMetadata(
            network=model.config,
            train=config,
            config_hash=config_hash(config),
            seed=config.seed,
            isolation=config.isolation,
            mode=config.mode,
            task=config.task,
            class_names=dataset.class_names,
            sources=sources,
            target=target,
            permutations=[list(p) for p in perm_set.permutations] if perm_set else None,
            permutation_seed=perm_set.seed if perm_set else None,
            permutation_hash=perm_set.digest() if perm_set else None,
            best_epoch=state.best_epoch,
            best_val_metric=state.best_val_metric,
        )
        checkpoint = self.store.save_checkpoint(model, metadata)
        log = self.store.write_epoch_log(state.history)
        return TrainOutcome(state=state, metadata=metadata, checkpoint=checkpoint, log=log)

    def load_checkpoint(self, path: Path) -> LoadedCheckpoint:
        if path not in self._checkpoints:
            self._checkpoints[path] = load_checkpoint(path)
        return self._checkpoints[path]

    def evaluate(
        self,
        checkpoint: Path,
        dataset: DomainDataset,
        os_config: OSConfig,
        target: str | None = None,
        trace: bool = False,
    ) -> EvalOutcome:
        """Accuracy after 0..``os_config.iterations`` adaptation steps.

        The test set is ``target``, else the checkpoint's held-out target when the
        dataset has it, else the whole dataset.

        Raises:
            CheckpointError: if the dataset does not fit the checkpoint
        """
        loaded = self.load_checkpoint(checkpoint)
        meta = loaded.metadata
        if dataset.resolution != meta.network.input_size:
            msg = (
                f"checkpoint expects {meta.network.input_size}px images, "
                f"data has {dataset.resolution}px"
            )
            raise CheckpointError(msg)
        if dataset.class_names != meta.class_names:
            msg = f"checkpoint classes {meta.class_names} differ from data {dataset.class_names}"
            raise CheckpointError(msg)

        name = target or (meta.target if meta.target in dataset.domains else None)
        if name is not None and name not in dataset.domains:
            msg = f"unknown target domain {name!r}"
            raise UsageError(msg)
        test_set = dataset.labeled([name] if name else None)
        sweep = adapt_batch(loaded.model, test_set, os_config.resolve(meta.train), loaded.perm_set)
        trace_path = self.store.write_trace(sweep.traces) if trace else None
        return EvalOutcome(sweep=sweep, target=name, trace=trace_path)

    def run_protocol(
        self,
        spec: ProtocolSpec,
        dataset: DomainDataset,
        target: str | None = None,
        perms: Path | None = None,
    ) -> ProtocolResult:
        """Run a protocol over ``dataset``; da_multi runs one target or all of them."""
        perm_set = permset.load(perms) if perms is not None else None
        if spec.protocol == "dg_loo":
            return evalproto.run_dg_loo(dataset, spec, perm_set)
        if spec.protocol == "da_multi":
            if target is not None:
                return evalproto.run_da(dataset, target, spec, perm_set)
            return evalproto.run_da_multi(dataset, spec, perm_set)
        return evalproto.run_pda(dataset, spec, perm_set)

    def report(
        self,
        result: ProtocolResult,
        fmt: str = "md",
        gains: bool = False,
        with_references: bool = False,
    ) -> list[Path]:
        """Write result.csv and, per options, result.md and gains.md."""
        return evalproto.emit_report(result, self.store, fmt, gains, with_references)

    def load_result(self, path: Path) -> ProtocolResult:
        return evalproto.load_result(path)
