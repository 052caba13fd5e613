"""Run directory storage for geos: manifests, checkpoints, logs and reports."""

from __future__ import annotations

import csv
import hashlib
import logging
import pickle
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import torch
from pydantic import ValidationError

from lib.errors import CheckpointError, ConfigError
from lib.models import CheckpointMetadata, EpochRecord, OSTrace, RunManifest
from lib.netcore import GeosModel, build, load_prefixed_state, prefixed_state
from lib.permset import PermutationSet

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
CHECKPOINT = "checkpoint.pt"
EPOCH_LOG = "log.csv"
TRACE = "trace.csv"
RESULT_CSV = "result.csv"
RESULT_MD = "result.md"
GAINS_MD = "gains.md"
PERMS = "perms.txt"

EPOCH_LOG_COLUMNS = ("epoch", "L_p", "L_a", "val_metric", "lr")
TRACE_COLUMNS = ("sample_id", "iteration", "aux_loss", "predicted_class")

_CHUNK = 1 << 20


def content_hash(path: Path) -> str:
    """SHA-256 of a file, or of a directory's sorted relative paths and file hashes."""
    digest = hashlib.sha256()
    if path.is_dir():
        for file in sorted(p for p in path.rglob("*") if p.is_file()):
            digest.update(file.relative_to(path).as_posix().encode("utf-8"))
            digest.update(content_hash(file).encode("ascii"))
        return digest.hexdigest()
    with path.open("rb") as handle:
        while chunk := handle.read(_CHUNK):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass(frozen=True)
class LoadedCheckpoint:
    """A rebuilt network with the metadata it was saved with."""

    model: GeosModel
    metadata: CheckpointMetadata
    perm_set: PermutationSet | None


def load_checkpoint(path: Path) -> LoadedCheckpoint:
    """Rebuild the network stored at ``path``.

    Raises:
        CheckpointError: if the file is missing, unreadable or inconsistent
    """
    if not path.is_file():
        msg = f"checkpoint not found: {path}"
        raise CheckpointError(msg)
    try:
        archive = torch.load(path, map_location="cpu", weights_only=True)
        metadata = CheckpointMetadata.model_validate(archive["metadata"])
        tensors = archive["tensors"]
    except (OSError, RuntimeError, KeyError, TypeError, pickle.UnpicklingError) as e:
        msg = f"cannot read checkpoint {path}: {e}"
        raise CheckpointError(msg) from e
    except ValidationError as e:
        msg = f"checkpoint {path} has invalid metadata: {e}"
        raise CheckpointError(msg) from e

    perm_set = None
    if metadata.permutations:
        perm_set = PermutationSet(
            n=len(metadata.permutations[0]),
            permutations=tuple(tuple(row) for row in metadata.permutations),
            seed=metadata.permutation_seed or 0,
        )
        if metadata.permutation_hash and perm_set.digest() != metadata.permutation_hash:
            msg = f"permutation rows in {path} do not match their recorded hash"
            raise CheckpointError(msg)

    model = build(metadata.network.model_copy(update={"pretrained": None}))
    load_prefixed_state(model, tensors)
    model.eval()
    return LoadedCheckpoint(model=model, metadata=metadata, perm_set=perm_set)


class RunStore:
    """Owns every file a command writes under its output directory."""

    def __init__(self, out_dir: Path) -> None:
        """Create the output directory if needed.

        Raises:
            ConfigError: if ``out_dir`` exists and is not a directory
        """
        if out_dir.exists() and not out_dir.is_dir():
            msg = f"output path is not a directory: {out_dir}"
            raise ConfigError(msg)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.out_dir = out_dir

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def write_manifest(self, manifest: RunManifest) -> Path:
        target = self.path(MANIFEST)
        target.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
        return target

    def read_manifest(self) -> RunManifest:
        return RunManifest.model_validate_json(self.path(MANIFEST).read_text(encoding="utf-8"))

    def save_checkpoint(self, model: GeosModel, metadata: CheckpointMetadata) -> Path:
        """Write the ``theta/`` and ``lambda/`` tensors with their metadata."""
        target = self.path(CHECKPOINT)
        torch.save(
            {"tensors": prefixed_state(model), "metadata": metadata.model_dump(mode="json")},
            target,
        )
        logger.info("Saved checkpoint to %s", target)
        return target

    def write_epoch_log(self, history: Iterable[EpochRecord]) -> Path:
        """One CSV row per epoch: epoch, L_p, L_a, val_metric, lr."""
        target = self.path(EPOCH_LOG)
        with target.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(EPOCH_LOG_COLUMNS)
            for record in history:
                writer.writerow(
                    [
                        record.epoch,
                        repr(record.loss_primary),
                        repr(record.loss_auxiliary),
                        repr(record.val_metric),
                        repr(record.lr),
                    ]
                )
        return target

    def write_trace(self, traces: Sequence[OSTrace]) -> Path:
        """Per-sample adaptation trace; iteration 0 has no loss."""
        target = self.path(TRACE)
        with target.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(TRACE_COLUMNS)
            for trace in traces:
                for k, predicted in enumerate(trace.predictions):
                    loss = repr(trace.aux_losses[k - 1]) if k else ""
                    writer.writerow([trace.sample_id, k, loss, predicted])
        return target

    def write_text(self, name: str, text: str) -> Path:
        target = self.path(name)
        target.write_text(text, encoding="utf-8")
        return target
