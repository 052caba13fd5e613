"""Tests for the public geos API."""

from pathlib import Path

import pytest

from lib import permset
from lib.api import GeosLab, TrainOutcome
from lib.config import Settings
from lib.datasets import DomainDataset, synthesize
from lib.errors import CheckpointError, UsageError
from lib.models import OSConfig, ProtocolSpec, SynthSpec, TrainConfig
from lib.storage import CHECKPOINT, EPOCH_LOG, MANIFEST, PERMS, TRACE


@pytest.fixture
def lab(tmp_path: Path):
    """A lab writing under a temporary directory, blind to the environment."""
    settings = Settings(_env_file=None)  # type: ignore[call-arg]
    with GeosLab(out_dir=tmp_path / "run", settings=settings) as instance:
        yield instance


@pytest.fixture
def trained(lab: GeosLab, tiny_dataset: DomainDataset, tiny_config: TrainConfig) -> TrainOutcome:
    """One epoch of dg training with synth2 held out."""
    return lab.train(tiny_config, tiny_dataset, target="synth2")


def test_resolve_data_root(lab: GeosLab, tmp_path: Path):
    """Test the explicit path, then the settings, then the usage error."""
    with pytest.raises(UsageError, match="GEOS_DATA_ROOT"):
        lab.resolve_data_root(None)
    lab.settings.data_root = tmp_path / "data"
    assert lab.resolve_data_root(None) == tmp_path / "data"
    assert lab.resolve_data_root(tmp_path / "other") == tmp_path / "other"


def test_start_run_writes_manifest(lab: GeosLab, tmp_path: Path, tiny_config: TrainConfig):
    """Test the manifest of a command: seeds, resolved config and hashed inputs."""
    existing = tmp_path / "train.env"
    existing.write_text("epochs=1\n", encoding="utf-8")

    manifest = lab.start_run(
        "train",
        5,
        options={"data": tmp_path},
        config=tiny_config,
        inputs=[existing, tmp_path / "missing.env"],
        context={"os": "linux"},
    )

    assert (lab.store.out_dir / MANIFEST).is_file()
    assert lab.store.read_manifest() == manifest
    assert set(manifest.seeds) == {"init", "split", "perms", "os"}
    assert manifest.options == {"data": str(tmp_path)}
    assert manifest.config["epochs"] == 1
    assert "config_hash" in manifest.config
    assert list(manifest.inputs) == [str(existing)]


def test_synthesize_export(lab: GeosLab, tiny_spec: SynthSpec):
    """Test that exported images land in the folder layout under the output dir."""
    dataset = lab.synthesize(tiny_spec, export=True)
    written = list((lab.store.out_dir / "synth0" / "circle").glob("*.png"))
    assert len(written) == tiny_spec.samples_per_domain_class
    assert len(dataset) == 54


def test_permgen_writes_the_run_file(lab: GeosLab):
    """Test that a generated set is saved where training looks for it."""
    perm_set = lab.permgen(9, 4, 1)
    assert permset.load(lab.store.path(PERMS)).permutations == perm_set.permutations


def test_train_writes_checkpoint_and_log(trained: TrainOutcome, lab: GeosLab):
    """Test the files and metadata of a dg run."""
    assert trained.checkpoint == lab.store.path(CHECKPOINT)
    assert trained.log == lab.store.path(EPOCH_LOG)
    assert trained.checkpoint.is_file()
    assert lab.store.path(PERMS).is_file()
    assert trained.metadata.sources == ["synth0", "synth1"]
    assert trained.metadata.target == "synth2"
    assert trained.metadata.isolation
    assert trained.metadata.best_epoch == 1
    assert trained.metadata.permutation_hash is not None


def test_train_with_a_given_perm_set(
    lab: GeosLab, tiny_dataset: DomainDataset, tiny_config: TrainConfig, tmp_path: Path
):
    """Test that a permutation file replaces the generated set."""
    path = tmp_path / "perms.txt"
    given = permset.generate(9, 5, 42)
    permset.save(given, path)
    outcome = lab.train(tiny_config, tiny_dataset, target="synth2", perms=path)
    assert outcome.metadata.permutation_hash == given.digest()


def test_train_rotation_has_no_perm_set(
    lab: GeosLab, tiny_dataset: DomainDataset, tiny_config: TrainConfig
):
    """Test that rotation runs neither need nor store permutations."""
    config = tiny_config.model_copy(update={"task": "rotation"})
    outcome = lab.train(config, tiny_dataset, target="synth2")
    assert outcome.metadata.permutations is None
    assert not lab.store.path(PERMS).exists()


@pytest.mark.parametrize(
    ("mode", "target", "source", "message"),
    [
        ("da", None, None, "needs --target"),
        ("pda", "synth2", None, "needs --source"),
        ("dg", "synth9", None, "unknown domain"),
    ],
)
def test_train_usage_errors(
    lab: GeosLab,
    tiny_dataset: DomainDataset,
    tiny_config: TrainConfig,
    mode: str,
    target: str | None,
    source: str | None,
    message: str,
):
    """Test that each mode checks the domains it needs."""
    config = tiny_config.model_copy(update={"mode": mode})
    with pytest.raises(UsageError, match=message):
        lab.train(config, tiny_dataset, target=target, source=source)


def test_train_pda_sources(lab: GeosLab, tiny_dataset: DomainDataset, tiny_config: TrainConfig):
    """Test that pda trains on the one labeled source."""
    config = tiny_config.model_copy(update={"mode": "pda"})
    outcome = lab.train(config, tiny_dataset, target="synth2", source="synth0")
    assert outcome.metadata.sources == ["synth0"]


def test_evaluate_defaults_to_the_held_out_target(
    trained: TrainOutcome, lab: GeosLab, tiny_dataset: DomainDataset
):
    """Test accuracy per iteration on the checkpoint's target, with a trace."""
    outcome = lab.evaluate(
        trained.checkpoint, tiny_dataset, OSConfig(iterations=1, batch_size=4), trace=True
    )
    assert outcome.target == "synth2"
    assert len(outcome.sweep.accuracies()) == 2
    assert outcome.trace == lab.store.path(TRACE)
    assert outcome.trace.is_file()


def test_evaluate_rejects_mismatched_data(trained: TrainOutcome, lab: GeosLab):
    """Test that resolution and class names must match the checkpoint."""
    other_size = synthesize(
        SynthSpec(num_domains=1, num_classes=3, samples_per_domain_class=1, resolution=30)
    )
    with pytest.raises(CheckpointError, match="30px"):
        lab.evaluate(trained.checkpoint, other_size, OSConfig(iterations=0))
    other_classes = synthesize(
        SynthSpec(num_domains=1, num_classes=4, samples_per_domain_class=1, resolution=24)
    )
    with pytest.raises(CheckpointError, match="classes"):
        lab.evaluate(trained.checkpoint, other_classes, OSConfig(iterations=0))


def test_evaluate_unknown_target(trained: TrainOutcome, lab: GeosLab, tiny_dataset: DomainDataset):
    """Test the error for a target outside the dataset."""
    with pytest.raises(UsageError):
        lab.evaluate(trained.checkpoint, tiny_dataset, OSConfig(iterations=0), target="synth9")


def test_protocol_and_report(lab: GeosLab, tiny_dataset: DomainDataset, tiny_config: TrainConfig):
    """Test a single-target da protocol written as csv and markdown."""
    spec = ProtocolSpec(
        protocol="da_multi",
        repetitions=1,
        methods=["ges"],
        os_max_iterations=0,
        train=tiny_config,
    )
    result = lab.run_protocol(spec, tiny_dataset, target="synth1")
    assert result.targets == ["synth1"]
    written = lab.report(result, "md")
    assert [p.name for p in written] == ["result.csv", "result.md"]
    assert lab.load_result(written[0]).rows == result.rows
