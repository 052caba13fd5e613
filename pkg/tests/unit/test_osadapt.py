"""Tests for one-sample adaptation."""

from unittest.mock import patch

import pytest
import torch
import torch.nn.functional as F  # noqa: N812

from lib import osadapt
from lib.datasets import DomainDataset, LabeledSet
from lib.errors import AdaptationDivergenceError, ConfigError, EmptyEvaluationError
from lib.models import OSConfig, OSTrace, TrainConfig
from lib.netcore import GeosModel, build, forward_auxiliary, forward_primary, module_digest
from lib.osadapt import IterationSweep, adapt_and_predict, adapt_batch
from lib.permset import PermutationSet
from lib.seeding import derive_seed
from lib.sstasks import collate, make_ss_batch


@pytest.fixture
def os_config(tiny_config: TrainConfig) -> OSConfig:
    """Three steps on eight variants, resolved against the tiny training config."""
    return OSConfig(iterations=3, batch_size=8, seed=1).resolve(
        tiny_config.model_copy(update={"lr_main": 0.05, "lr_head": 0.05})
    )


@pytest.fixture
def test_set(tiny_dataset: DomainDataset) -> LabeledSet:
    return tiny_dataset.labeled(["synth2"])


def plain_logits(model: GeosModel, image: torch.Tensor) -> torch.Tensor:
    model.eval()
    with torch.no_grad():
        logits = forward_primary(model, image.unsqueeze(0)).primary_logits
    assert logits is not None
    return logits[0]


class TestAdaptAndPredict:
    """Tests for adapting to a single image."""

    def test_zero_iterations_is_plain_inference(
        self,
        tiny_model: GeosModel,
        noise_image: torch.Tensor,
        os_config: OSConfig,
        perm_set: PermutationSet,
    ) -> None:
        """Test that no adaptation step gives the plain prediction."""
        config = os_config.model_copy(update={"iterations": 0})
        predicted, trace = adapt_and_predict(tiny_model, noise_image, config, perm_set)
        expected = plain_logits(tiny_model, noise_image)
        assert trace.pre_logits == expected.tolist()
        assert predicted == int(expected.argmax())
        assert trace.predictions == [predicted]
        assert trace.aux_losses == []

    def test_lambda_is_restored_and_theta_untouched(
        self,
        tiny_model: GeosModel,
        noise_image: torch.Tensor,
        os_config: OSConfig,
        perm_set: PermutationSet,
    ) -> None:
        """Test that adaptation leaves both parameter groups as it found them."""
        theta, lam = module_digest(tiny_model.theta), module_digest(tiny_model.aux)
        before = plain_logits(tiny_model, noise_image)

        _, trace = adapt_and_predict(tiny_model, noise_image, os_config, perm_set, "img")

        assert trace.lambda_restored
        assert len(trace.aux_losses) == 3
        assert len(trace.post_losses) == 3
        assert len(trace.predictions) == 4
        assert module_digest(tiny_model.theta) == theta
        assert module_digest(tiny_model.aux) == lam
        assert torch.equal(plain_logits(tiny_model, noise_image), before)
        assert all(p.requires_grad for p in tiny_model.theta.parameters())

    def test_baseline_is_the_unadapted_loss_on_each_batch(
        self,
        tiny_model: GeosModel,
        noise_image: torch.Tensor,
        os_config: OSConfig,
        perm_set: PermutationSet,
    ) -> None:
        """Test that step k's baseline is the untouched Λ scored on step k's own batch."""
        _, trace = adapt_and_predict(tiny_model, noise_image, os_config, perm_set, "img")
        assert len(trace.baseline_losses) == len(trace.post_losses) == 3

        assert os_config.task is not None
        tiny_model.eval()
        for k, baseline in enumerate(trace.baseline_losses):
            variants = make_ss_batch(
                [("img", noise_image)],
                os_config.task,
                perm_set,
                os_config.batch_size,
                derive_seed(os_config.seed, "img", k),
                os_config.augment,
            )
            x, v = collate(variants)
            with torch.no_grad():
                logits = forward_auxiliary(tiny_model, x).pretext_logits
            assert baseline == pytest.approx(float(F.cross_entropy(logits, v)), abs=1e-6)

    def test_adaptation_changes_the_logits(
        self,
        tiny_model: GeosModel,
        noise_image: torch.Tensor,
        os_config: OSConfig,
        perm_set: PermutationSet,
    ) -> None:
        """Test that the steps reach the primary output through the refinement."""
        _, trace = adapt_and_predict(tiny_model, noise_image, os_config, perm_set)
        assert trace.post_logits != trace.pre_logits

    def test_deterministic(
        self,
        tiny_model: GeosModel,
        noise_image: torch.Tensor,
        os_config: OSConfig,
        perm_set: PermutationSet,
    ) -> None:
        """Test that the seed and sample id fix the trajectory."""
        _, first = adapt_and_predict(tiny_model, noise_image, os_config, perm_set, "img")
        _, second = adapt_and_predict(tiny_model, noise_image, os_config, perm_set, "img")
        assert first == second

    def test_unresolved_config(
        self, tiny_model: GeosModel, noise_image: torch.Tensor, perm_set: PermutationSet
    ) -> None:
        """Test that settings must be inherited from training first."""
        with pytest.raises(ConfigError, match="not resolved"):
            adapt_and_predict(tiny_model, noise_image, OSConfig(), perm_set)

    def test_divergence_restores_lambda(
        self,
        tiny_model: GeosModel,
        noise_image: torch.Tensor,
        os_config: OSConfig,
        perm_set: PermutationSet,
    ) -> None:
        """Test that a non-finite loss stops adaptation with Λ restored."""
        lam = module_digest(tiny_model.aux)
        real_loss = osadapt._aux_loss
        calls = 0

        def failing(*args: object) -> torch.Tensor:
            nonlocal calls
            calls += 1
            loss = real_loss(*args)  # type: ignore[arg-type]
            # the third call is the loss before the second step
            return loss * float("nan") if calls == 3 else loss

        with (
            patch("lib.osadapt._aux_loss", side_effect=failing),
            pytest.raises(AdaptationDivergenceError) as excinfo,
        ):
            adapt_and_predict(tiny_model, noise_image, os_config, perm_set, "img")

        assert excinfo.value.batch_id == "img#1"
        assert module_digest(tiny_model.aux) == lam


class TestAdaptBatch:
    """Tests for adapting to every sample of a test set."""

    def test_one_prediction_per_iteration(
        self,
        tiny_model: GeosModel,
        test_set: LabeledSet,
        os_config: OSConfig,
        perm_set: PermutationSet,
    ) -> None:
        """Test the shape of a sweep and its k=0 column."""
        sweep = adapt_batch(tiny_model, test_set, os_config, perm_set)
        assert sweep.max_iterations == 3
        assert len(sweep.accuracies()) == 4
        assert len(sweep.traces) == len(test_set)
        for i, predictions in enumerate(sweep.predictions):
            image = test_set.batch([i])[0][0]
            assert predictions[0] == int(plain_logits(tiny_model, image).argmax())

    def test_sample_order_does_not_matter(
        self,
        tiny_model: GeosModel,
        test_set: LabeledSet,
        os_config: OSConfig,
        perm_set: PermutationSet,
    ) -> None:
        """Test that each sample is adapted independently of the others."""
        forward = adapt_batch(tiny_model, test_set, os_config, perm_set)
        order = list(reversed(range(len(test_set))))
        reversed_set = LabeledSet(
            refs=tuple(test_set.refs[i] for i in order),
            domains=tuple(test_set.domains[i] for i in order),
            images=test_set.images[order],
            labels=test_set.labels[order],
        )
        backward = adapt_batch(tiny_model, reversed_set, os_config, perm_set)
        by_id = {t.sample_id: t.predictions for t in backward.traces}
        for trace in forward.traces:
            assert by_id[trace.sample_id] == trace.predictions

    def test_parallel_matches_sequential(
        self,
        tiny_model: GeosModel,
        test_set: LabeledSet,
        os_config: OSConfig,
        perm_set: PermutationSet,
    ) -> None:
        """Test that worker threads give the same predictions in the same order."""
        sequential = adapt_batch(tiny_model, test_set, os_config, perm_set)
        parallel = adapt_batch(
            tiny_model, test_set, os_config.model_copy(update={"jobs": 3}), perm_set
        )
        assert parallel.predictions == sequential.predictions

    def test_restart_per_k(
        self,
        tiny_model: GeosModel,
        test_set: LabeledSet,
        os_config: OSConfig,
        perm_set: PermutationSet,
    ) -> None:
        """Test that restarting from Λ for every k repeats the incremental trajectory."""
        incremental = adapt_batch(tiny_model, test_set, os_config, perm_set)
        restarted = adapt_batch(
            tiny_model, test_set, os_config.model_copy(update={"restart_per_k": True}), perm_set
        )
        assert restarted.predictions == incremental.predictions

    def test_theta_checksum_survives_a_hundred_samples(
        self, tiny_model: GeosModel, os_config: OSConfig, perm_set: PermutationSet
    ) -> None:
        """Test that adapting to a hundred samples leaves every Θ tensor bit for bit."""
        generator = torch.Generator().manual_seed(3)
        count = 100
        images = torch.randint(0, 256, (count, 3, 24, 24), generator=generator)
        test_set = LabeledSet(
            refs=tuple(f"noise/{i}.png" for i in range(count)),
            domains=("noise",) * count,
            images=images.to(torch.uint8),
            labels=torch.randint(0, 3, (count,), generator=generator),
        )
        theta, lam = module_digest(tiny_model.theta), module_digest(tiny_model.aux)

        sweep = adapt_batch(tiny_model, test_set, os_config, perm_set)

        assert len(sweep.traces) == count
        assert all(trace.lambda_restored for trace in sweep.traces)
        assert module_digest(tiny_model.theta) == theta
        assert module_digest(tiny_model.aux) == lam

    def test_trace_sink(
        self,
        tiny_model: GeosModel,
        test_set: LabeledSet,
        os_config: OSConfig,
        perm_set: PermutationSet,
    ) -> None:
        """Test that every trace is handed to the sink."""
        seen: list[str] = []
        adapt_batch(
            tiny_model, test_set, os_config, perm_set, on_trace=lambda t: seen.append(t.sample_id)
        )
        assert seen == list(test_set.refs)

    def test_rotation(self, test_set: LabeledSet, tiny_config: TrainConfig) -> None:
        """Test adaptation on the rotation task, which needs no permutation set."""
        rotation = tiny_config.model_copy(update={"task": "rotation"})
        model = build(rotation.network_config(3, 4))
        config = OSConfig(iterations=1, batch_size=4).resolve(rotation)
        sweep = adapt_batch(model, test_set, config, None)
        assert sweep.max_iterations == 1


class TestIterationSweep:
    """Tests for IterationSweep."""

    def test_accuracies(self) -> None:
        """Test accuracy per iteration count."""
        sweep = IterationSweep(labels=[0, 1, 1], predictions=[[0, 0], [0, 1], [1, 1]])
        assert sweep.accuracies() == pytest.approx([2 / 3, 1.0])

    def test_empty(self) -> None:
        """Test that an empty sweep has no accuracy."""
        with pytest.raises(EmptyEvaluationError):
            IterationSweep(labels=[]).accuracy(0)

    def test_rows(self) -> None:
        """Test that k=0 is reported as the plain method and k>=1 as adapted."""
        sweep = IterationSweep(labels=[0], predictions=[[0, 0, 1]])
        rows = sweep.rows("dg_loo", "synth2", run=1, seed=9)
        assert [(r.method, r.os_iterations, r.accuracy) for r in rows] == [
            ("ges", 0, 1.0),
            ("geos", 1, 1.0),
            ("geos", 2, 0.0),
        ]
        rotation = sweep.rows("dg_loo", "synth2", run=1, seed=9, rotation=True)
        assert [r.method for r in rotation] == ["ges_rotation", "geos_rotation", "geos_rotation"]

    def test_progress_rate(self) -> None:
        """Test the share of adapted samples whose final Λ beats the unadapted one."""
        better = OSTrace(sample_id="a", aux_losses=[2.0], post_losses=[1.0], baseline_losses=[2.0])
        worse = OSTrace(sample_id="b", aux_losses=[2.0], post_losses=[3.0], baseline_losses=[2.0])
        plain = OSTrace(sample_id="c")
        sweep = IterationSweep(labels=[0, 0, 0], traces=[better, worse, plain])
        assert sweep.progress_rate() == 0.5
        assert IterationSweep(labels=[0], traces=[plain]).progress_rate() == 0.0
