"""Tests for run directory storage."""

import csv
from datetime import UTC, datetime
from pathlib import Path

import pytest
import torch

from lib.config import config_hash
from lib.errors import CheckpointError, ConfigError
from lib.models import CheckpointMetadata, EpochRecord, OSTrace, RunManifest, TrainConfig
from lib.netcore import GeosModel, module_digest
from lib.permset import PermutationSet
from lib.storage import RunStore, content_hash, load_checkpoint


def metadata_for(
    model: GeosModel, config: TrainConfig, perm_set: PermutationSet | None
) -> CheckpointMetadata:
    return CheckpointMetadata(
        network=model.config,
        train=config,
        config_hash=config_hash(config),
        seed=config.seed,
        isolation=config.isolation,
        mode=config.mode,
        task=config.task,
        class_names=["circle", "square", "triangle"],
        sources=["synth0", "synth1"],
        target="synth2",
        permutations=[list(p) for p in perm_set.permutations] if perm_set else None,
        permutation_seed=perm_set.seed if perm_set else None,
        permutation_hash=perm_set.digest() if perm_set else None,
        best_epoch=1,
        best_val_metric=0.5,
    )


class TestRunStore:
    """Tests for RunStore."""

    def test_creates_the_directory(self, tmp_path: Path) -> None:
        """Test that the output directory is made on demand."""
        store = RunStore(tmp_path / "a" / "b")
        assert store.out_dir.is_dir()

    def test_output_path_is_a_file(self, tmp_path: Path) -> None:
        """Test that a file in the way of the output directory is rejected."""
        blocker = tmp_path / "runs"
        blocker.write_text("x", encoding="utf-8")
        with pytest.raises(ConfigError):
            RunStore(blocker)

    def test_manifest_round_trip(self, tmp_path: Path) -> None:
        """Test that a manifest reads back equal."""
        store = RunStore(tmp_path)
        manifest = RunManifest(
            command="train",
            created_at=datetime(2024, 1, 2, tzinfo=UTC),
            root_seed=3,
            options={"target": "synth2"},
            seeds={"init": 11},
        )
        store.write_manifest(manifest)
        assert store.read_manifest() == manifest

    def test_epoch_log(self, tmp_path: Path) -> None:
        """Test the header and one row per epoch."""
        store = RunStore(tmp_path)
        history = [
            EpochRecord(epoch=e, loss_primary=lp, loss_auxiliary=la, val_metric=v, lr=0.01)
            for e, lp, la, v in [(1, 1.5, 3.25, 0.4), (2, 1.0, 3.0, 0.6)]
        ]
        path = store.write_epoch_log(history)
        with path.open(newline="", encoding="utf-8") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["epoch", "L_p", "L_a", "val_metric", "lr"]
        assert rows[1] == ["1", "1.5", "3.25", "0.4", "0.01"]
        assert len(rows) == 3

    def test_trace(self, tmp_path: Path) -> None:
        """Test that iteration 0 has no loss and later iterations the loss before the step."""
        store = RunStore(tmp_path)
        trace = OSTrace(sample_id="s/1.png", aux_losses=[2.5, 2.0], predictions=[1, 1, 2])
        path = store.write_trace([trace])
        with path.open(newline="", encoding="utf-8") as handle:
            rows = list(csv.reader(handle))
        assert rows == [
            ["sample_id", "iteration", "aux_loss", "predicted_class"],
            ["s/1.png", "0", "", "1"],
            ["s/1.png", "1", "2.5", "1"],
            ["s/1.png", "2", "2.0", "2"],
        ]


class TestCheckpoint:
    """Tests for saving and loading checkpoints."""

    def test_round_trip(
        self,
        tmp_path: Path,
        tiny_model: GeosModel,
        tiny_config: TrainConfig,
        perm_set: PermutationSet,
    ) -> None:
        """Test that the rebuilt network and permutation set equal the saved ones."""
        store = RunStore(tmp_path)
        metadata = metadata_for(tiny_model, tiny_config, perm_set)
        path = store.save_checkpoint(tiny_model, metadata)

        loaded = load_checkpoint(path)

        assert module_digest(loaded.model) == module_digest(tiny_model)
        assert loaded.metadata == metadata
        assert loaded.perm_set is not None
        assert loaded.perm_set.permutations == perm_set.permutations
        assert not loaded.model.training

    def test_rotation_has_no_perm_set(
        self, tmp_path: Path, tiny_model: GeosModel, tiny_config: TrainConfig
    ) -> None:
        """Test that a checkpoint without permutations loads without a set."""
        path = RunStore(tmp_path).save_checkpoint(
            tiny_model, metadata_for(tiny_model, tiny_config, None)
        )
        assert load_checkpoint(path).perm_set is None

    def test_tampered_permutations(
        self,
        tmp_path: Path,
        tiny_model: GeosModel,
        tiny_config: TrainConfig,
        perm_set: PermutationSet,
    ) -> None:
        """Test that rows not matching their recorded hash are rejected."""
        metadata = metadata_for(tiny_model, tiny_config, perm_set)
        assert metadata.permutations is not None
        rows = [metadata.permutations[1], metadata.permutations[0], *metadata.permutations[2:]]
        path = RunStore(tmp_path).save_checkpoint(
            tiny_model, metadata.model_copy(update={"permutations": rows})
        )
        with pytest.raises(CheckpointError, match="hash"):
            load_checkpoint(path)

    def test_missing(self, tmp_path: Path) -> None:
        """Test the error for a path with no checkpoint."""
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "checkpoint.pt")

    def test_not_a_checkpoint(self, tmp_path: Path) -> None:
        """Test that a tensor file without metadata is rejected."""
        path = tmp_path / "checkpoint.pt"
        torch.save({"weights": torch.zeros(2)}, path)
        with pytest.raises(CheckpointError, match="cannot read"):
            load_checkpoint(path)

    def test_garbage(self, tmp_path: Path) -> None:
        """Test that an unreadable file is rejected."""
        path = tmp_path / "checkpoint.pt"
        path.write_bytes(b"garbage")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestContentHash:
    """Tests for content_hash."""

    def test_file(self, tmp_path: Path) -> None:
        """Test the known digest of an empty file."""
        path = tmp_path / "empty"
        path.write_bytes(b"")
        assert content_hash(path) == (
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        )

    def test_directory_follows_names_and_contents(self, tmp_path: Path) -> None:
        """Test that renaming or editing a file changes a directory's digest."""
        (tmp_path / "d").mkdir()
        (tmp_path / "d" / "a.txt").write_text("one", encoding="utf-8")
        before = content_hash(tmp_path / "d")
        assert content_hash(tmp_path / "d") == before
        (tmp_path / "d" / "a.txt").rename(tmp_path / "d" / "b.txt")
        renamed = content_hash(tmp_path / "d")
        assert renamed != before
        (tmp_path / "d" / "b.txt").write_text("two", encoding="utf-8")
        assert content_hash(tmp_path / "d") != renamed
