"""One-sample adaptation: tune Λ on variants of a single test image, predict, restore."""

from __future__ import annotations

import copy
import logging
from collections.abc import Callable, Iterator
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F  # noqa: N812
from torch import Tensor, nn
from torch.func import functional_call

from lib.datasets import LabeledSet
from lib.errors import AdaptationDivergenceError, ConfigError, EmptyEvaluationError
from lib.models import Method, OSConfig, OSTrace, ProtocolName, ProtocolRow
from lib.netcore import (
    GeosNet,
    LambdaSnapshot,
    forward_auxiliary,
    forward_primary,
    model_device,
    restore_lambda,
    snapshot_lambda,
)
from lib.permset import PermutationSet
from lib.seeding import derive_seed
from lib.sstasks import as_float_image, collate, make_ss_batch
from lib.trainer import make_optimizer

logger = logging.getLogger(__name__)

TraceSink = Callable[[OSTrace], None]


@dataclass
class IterationSweep:
    """Predictions after 0..max adaptation steps for every sample of a test set."""

    labels: list[int]
    predictions: list[list[int]] = field(default_factory=list)
    traces: list[OSTrace] = field(default_factory=list)

    @property
    def max_iterations(self) -> int:
        return len(self.predictions[0]) - 1 if self.predictions else 0

    def accuracy(self, k: int) -> float:
        """Accuracy with the prediction each sample had after ``k`` steps."""
        if not self.labels:
            msg = "no samples were adapted"
            raise EmptyEvaluationError(msg)
        hits = sum(preds[k] == y for preds, y in zip(self.predictions, self.labels, strict=True))
        return hits / len(self.labels)

    def accuracies(self) -> list[float]:
        return [self.accuracy(k) for k in range(self.max_iterations + 1)]

    def progress_rate(self) -> float:
        """Share of adapted samples whose final Λ has a lower loss than the unadapted Λ.

        Both losses are taken in eval mode on the batch of the last step.
        """
        adapted = [trace for trace in self.traces if trace.aux_losses]
        if not adapted:
            return 0.0
        return sum(trace.made_progress for trace in adapted) / len(adapted)

    def rows(
        self,
        protocol: ProtocolName,
        target: str,
        run: int,
        seed: int,
        rotation: bool = False,
        source: str | None = None,
    ) -> list[ProtocolRow]:
        """One row per iteration count: k=0 is plain inference, k≥1 is adapted."""
        plain: Method = "ges_rotation" if rotation else "ges"
        adapted: Method = "geos_rotation" if rotation else "geos"
        return [
            ProtocolRow(
                protocol=protocol,
                target=target,
                source=source,
                method=plain if k == 0 else adapted,
                os_iterations=k,
                run=run,
                seed=seed,
                accuracy=accuracy,
            )
            for k, accuracy in enumerate(self.accuracies())
        ]


def _check_resolved(config: OSConfig) -> None:
    missing = [
        name
        for name in ("task", "optimizer", "lr", "lr_head", "momentum", "weight_decay", "alpha")
        if getattr(config, name) is None
    ]
    if missing:
        msg = f"adaptation settings not resolved from training: {', '.join(missing)}"
        raise ConfigError(msg)


@contextmanager
def _frozen(module: nn.Module) -> Iterator[None]:
    """Switch off gradients of ``module`` for the duration of the block."""
    flags = [(param, param.requires_grad) for param in module.parameters()]
    for param, _ in flags:
        param.requires_grad_(False)
    try:
        yield
    finally:
        for param, flag in flags:
            param.requires_grad_(flag)


def _predict(model: GeosNet, image: Tensor) -> Tensor:
    model.eval()
    with torch.no_grad():
        return forward_primary(model, image.unsqueeze(0).to(model_device(model))).primary_logits[0]


def _aux_loss(model: GeosNet, batch: tuple[Tensor, Tensor]) -> Tensor:
    x, v = batch
    device = model_device(model)
    return F.cross_entropy(forward_auxiliary(model, x.to(device)).pretext_logits, v.to(device))


def _baseline_loss(
    model: GeosNet, snapshot: LambdaSnapshot, batch: tuple[Tensor, Tensor]
) -> float:
    """Loss of the unadapted Λ on ``batch``, Λ's current weights left in place."""
    x, v = batch
    device = model_device(model)
    state = {f"aux.{name}": tensor for name, tensor in snapshot.state.items()}
    with torch.no_grad():
        out = functional_call(model, state, (x.to(device),), {"branch": "auxiliary"})
        return float(F.cross_entropy(out.pretext_logits, v.to(device)))


def _adapt(
    model: GeosNet,
    image: Tensor,
    config: OSConfig,
    perm_set: PermutationSet | None,
    sample_id: str,
) -> OSTrace:
    _check_resolved(config)
    assert config.task is not None
    assert config.optimizer is not None
    trace = OSTrace(sample_id=sample_id)
    snapshot = snapshot_lambda(model)
    was_training = model.training
    try:
        logits = _predict(model, image)
        trace.pre_logits = logits.tolist()
        trace.pre_class = int(logits.argmax())
        trace.predictions.append(trace.pre_class)
        if config.iterations == 0:
            trace.post_logits, trace.post_class = trace.pre_logits, trace.pre_class
            return trace

        optimizer = make_optimizer(
            {k: v for k, v in model.parameter_groups().items() if k.startswith("lambda")},
            config.optimizer,
            float(config.lr or 0.0),
            float(config.lr_head or 0.0),
            float(config.momentum or 0.0),
            float(config.weight_decay or 0.0),
        )
        with _frozen(model.theta):
            for k in range(config.iterations):
                variants = make_ss_batch(
                    [(sample_id, image)],
                    config.task,
                    perm_set,
                    config.batch_size,
                    derive_seed(config.seed, sample_id, k),
                    config.augment,
                )
                batch = collate(variants)
                model.eval()
                model.aux.train()
                optimizer.zero_grad(set_to_none=True)
                loss = _aux_loss(model, batch)
                if not torch.isfinite(loss):
                    raise AdaptationDivergenceError(f"{sample_id}#{k}", "L_a", float(loss))
                (float(config.alpha or 0.0) * loss).backward()
                optimizer.step()
                trace.aux_losses.append(float(loss))

                model.eval()
                with torch.no_grad():
                    trace.post_losses.append(float(_aux_loss(model, batch)))
                trace.baseline_losses.append(_baseline_loss(model, snapshot, batch))
                logits = _predict(model, image)
                trace.predictions.append(int(logits.argmax()))

        trace.post_logits = logits.tolist()
        trace.post_class = trace.predictions[-1]
        return trace
    except AdaptationDivergenceError:
        logger.warning("Adaptation diverged on sample %s", sample_id)
        raise
    finally:
        restore_lambda(model, snapshot)
        model.train(was_training)
        trace.lambda_restored = True


def adapt_and_predict(
    model: GeosNet,
    test_sample: Tensor,
    os_config: OSConfig,
    perm_set: PermutationSet | None,
    sample_id: str = "sample",
) -> tuple[int, OSTrace]:
    """Predict the class of one image after ``os_config.iterations`` steps on Λ.

    Each step draws a fresh batch of variants of the sample, seeded by
    (``os_config.seed``, ``sample_id``, step), and a fresh optimizer holds only Λ.
    Λ is restored before returning, also when an error is raised. Θ is never updated.

    Raises:
        ConfigError: if ``os_config`` was not resolved against a training config
        AdaptationDivergenceError: if the adaptation loss is not finite
    """
    trace = _adapt(model, as_float_image(test_sample), os_config, perm_set, sample_id)
    return trace.post_class, trace


def _sweep_one(
    model: GeosNet,
    image: Tensor,
    config: OSConfig,
    perm_set: PermutationSet | None,
    sample_id: str,
) -> tuple[list[int], OSTrace]:
    trace = _adapt(model, image, config, perm_set, sample_id)
    if not config.restart_per_k:
        return trace.predictions, trace
    predictions = [trace.predictions[0]]
    for k in range(1, config.iterations + 1):
        shorter = config.model_copy(update={"iterations": k})
        restarted = _adapt(model, image, shorter, perm_set, sample_id)
        predictions.append(restarted.post_class)
    return predictions, trace


def adapt_batch(
    model: GeosNet,
    test_set: LabeledSet,
    os_config: OSConfig,
    perm_set: PermutationSet | None,
    on_trace: TraceSink | None = None,
) -> IterationSweep:
    """Adapt to every test sample independently and record predictions for k = 0..max.

    Predictions for every k come from one adaptation trajectory per sample unless
    ``restart_per_k`` is set. With ``jobs`` > 1, contiguous chunks of samples run in
    threads, each on a private copy of the model; results keep sample order.
    Labels are used for scoring only.
    """
    _check_resolved(os_config)
    count = len(test_set)
    images = [as_float_image(image) for image in test_set.images]
    ids = list(test_set.refs)

    def run_chunk(indices: range, worker_model: GeosNet) -> list[tuple[list[int], OSTrace]]:
        return [
            _sweep_one(worker_model, images[i], os_config, perm_set, ids[i]) for i in indices
        ]

    jobs = max(1, min(os_config.jobs, count))
    if jobs == 1:
        results = run_chunk(range(count), model)
    else:
        bounds = [round(count * j / jobs) for j in range(jobs + 1)]
        chunks = [range(bounds[j], bounds[j + 1]) for j in range(jobs)]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_chunk, chunk, copy.deepcopy(model)) for chunk in chunks]
            results = [item for future in futures for item in future.result()]

    sweep = IterationSweep(labels=[int(y) for y in test_set.labels])
    for predictions, trace in results:
        sweep.predictions.append(predictions)
        sweep.traces.append(trace)
        if on_trace is not None:
            on_trace(trace)
    if sweep.traces and os_config.iterations:
        logger.info(
            "Adapted %d samples; accuracy by iteration %s; loss progress on %.0f%%",
            count,
            " ".join(f"{a:.4f}" for a in sweep.accuracies()),
            100 * sweep.progress_rate(),
        )
    return sweep
