"""Dual-objective training with batch accumulation and validation-based selection."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F  # noqa: N812
from torch import Tensor, nn
from torch.optim import SGD, Adam, Optimizer
from torch.optim.lr_scheduler import LRScheduler, MultiStepLR
from torch.utils.data import DataLoader, Dataset

from lib.datasets import DomainDataset, LabeledSet, UnlabeledPool, apply_split_lists, split
from lib.errors import (
    ConfigError,
    DivergenceError,
    EmptyEvaluationError,
    IsolationError,
    ProtocolError,
)
from lib.models import (
    ROTATION_CLASSES,
    AugmentConfig,
    EpochRecord,
    OptimizerName,
    Task,
    TrainConfig,
)
from lib.netcore import GeosNet, build, forward_auxiliary, forward_primary, model_device
from lib.permset import PermutationSet
from lib.seeding import derive_seed, generator_for
from lib.sstasks import (
    Sample,
    as_float_image,
    augment,
    collate,
    make_ss_batch,
    make_variant,
    num_pretext_classes,
)

logger = logging.getLogger(__name__)

Batch = tuple[Tensor, Tensor]
AuxTap = Callable[[Sequence[str]], None]


@dataclass(frozen=True)
class StepLosses:
    """Cross-entropy values of one step; ``auxiliary`` is None without an aux batch."""

    primary: float
    auxiliary: float | None


@dataclass
class TrainState:
    """Model, optimizer and model-selection bookkeeping of a run."""

    model: GeosNet
    config: TrainConfig
    optimizer: Optimizer
    scheduler: LRScheduler | None = None
    epoch: int = 0
    step: int = 0
    best_val_metric: float = -math.inf
    best_epoch: int | None = None
    best_state: dict[str, Tensor] | None = None
    history: list[EpochRecord] = field(default_factory=list)
    train_refs: frozenset[str] = frozenset()
    val_refs: frozenset[str] = frozenset()
    aux_refs: frozenset[str] = frozenset()

    def remember_best(self, metric: float) -> bool:
        """Keep a copy of the weights when ``metric`` beats every earlier epoch."""
        if metric <= self.best_val_metric:
            return False
        self.best_val_metric = metric
        self.best_epoch = self.epoch
        self.best_state = {k: v.detach().clone() for k, v in self.model.state_dict().items()}
        return True

    def load_best(self) -> None:
        """Put the selected weights back into the model."""
        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)


def make_optimizer(
    groups: dict[str, list[nn.Parameter]],
    name: OptimizerName,
    lr_main: float,
    lr_head: float,
    momentum: float,
    weight_decay: float,
) -> Optimizer:
    """Optimizer over named parameter groups; ``*_head`` groups use ``lr_head``."""
    param_groups = [
        {"params": params, "lr": lr_head if group.endswith("_head") else lr_main, "name": group}
        for group, params in groups.items()
        if params
    ]
    if name == "adam":
        return Adam(param_groups, weight_decay=weight_decay)
    return SGD(param_groups, lr=lr_main, momentum=momentum, weight_decay=weight_decay)


def init_state(model: GeosNet, config: TrainConfig) -> TrainState:
    """Fresh optimizer and step-decay schedule for ``model``."""
    optimizer = make_optimizer(
        model.parameter_groups(),
        config.optimizer,
        config.lr_main,
        config.lr_head,
        config.momentum,
        config.weight_decay,
    )
    scheduler = None
    if config.lr_decay_at_epoch is not None and config.lr_decay_factor > 1.0:
        scheduler = MultiStepLR(
            optimizer, milestones=[config.lr_decay_at_epoch], gamma=1.0 / config.lr_decay_factor
        )
    return TrainState(model=model, config=config, optimizer=optimizer, scheduler=scheduler)


def _check_finite(loss: Tensor, batch_id: str, name: str) -> None:
    if not torch.isfinite(loss):
        raise DivergenceError(batch_id, name, float(loss))


def _grad_copies(params: Iterable[nn.Parameter]) -> list[Tensor | None]:
    return [None if p.grad is None else p.grad.detach().clone() for p in params]


def _audit_lambda_untouched(model: GeosNet) -> None:
    for param in model.aux.parameters():
        if param.grad is not None and torch.count_nonzero(param.grad):
            msg = "the primary loss produced a gradient inside the auxiliary block"
            raise IsolationError(msg)


def _audit_theta_unchanged(model: GeosNet, before: list[Tensor | None]) -> None:
    for param, grad in zip(model.theta.parameters(), before, strict=True):
        if grad is None:
            same = param.grad is None
        else:
            same = param.grad is not None and torch.equal(param.grad, grad)
        if not same:
            msg = "the auxiliary loss changed a gradient of the primary network"
            raise IsolationError(msg)


def train_step(
    state: TrainState,
    primary_batch: Batch,
    aux_batch: Batch | None,
    batch_id: str = "",
) -> tuple[TrainState, StepLosses]:
    """One synchronized update: L_p into Θ, α·L_a into Λ, then a single optimizer step.

    Raises:
        ProtocolError: if a mode that trains the auxiliary task gets no aux batch
        DivergenceError: if either loss is not finite
        IsolationError: if ``audit_isolation`` is set and a gradient crossed the block
    """
    model, config = state.model, state.config
    use_aux = config.uses_auxiliary
    if use_aux and aux_batch is None:
        msg = f"mode {config.mode} needs an auxiliary batch"
        raise ProtocolError(msg)
    audit = config.audit_isolation and model.isolation
    device = model_device(model)

    model.train()
    state.optimizer.zero_grad(set_to_none=True)

    x, y = primary_batch
    loss_p = F.cross_entropy(forward_primary(model, x.to(device)).primary_logits, y.to(device))
    _check_finite(loss_p, batch_id, "L_p")
    loss_p.backward()

    loss_a_value = None
    if use_aux and aux_batch is not None:
        if audit:
            _audit_lambda_untouched(model)
            theta_grads = _grad_copies(model.theta.parameters())
        x_aux, v = aux_batch
        out = forward_auxiliary(model, x_aux.to(device))
        loss_a = F.cross_entropy(out.pretext_logits, v.to(device))
        _check_finite(loss_a, batch_id, "L_a")
        (config.alpha * loss_a).backward()
        if audit:
            _audit_theta_unchanged(model, theta_grads)
        loss_a_value = float(loss_a)

    state.optimizer.step()
    state.step += 1
    return state, StepLosses(primary=float(loss_p), auxiliary=loss_a_value)


def evaluate(model: GeosNet, labeled_set: LabeledSet, batch_size: int = 256) -> float:
    """Fraction of samples whose arg-max primary logit equals the label.

    Raises:
        EmptyEvaluationError: if the set is empty
    """
    if len(labeled_set) == 0:
        msg = "cannot evaluate on an empty set"
        raise EmptyEvaluationError(msg)
    device = model_device(model)
    model.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(labeled_set), batch_size):
            x, y = labeled_set.batch(range(start, min(len(labeled_set), start + batch_size)))
            logits = forward_primary(model, x.to(device)).primary_logits
            correct += int((logits.argmax(dim=1).cpu() == y).sum())
    return correct / len(labeled_set)


def pretext_accuracy(
    model: GeosNet,
    samples: Sequence[Sample],
    task: Task,
    perm_set: PermutationSet | None,
    seed: int,
    batch_size: int = 256,
) -> float:
    """Pretext-task accuracy on one seeded variant of every sample."""
    if not samples:
        msg = "cannot evaluate the pretext task on no samples"
        raise EmptyEvaluationError(msg)
    num_labels = num_pretext_classes(task, perm_set)
    generator = torch.Generator().manual_seed(seed)
    labels = torch.randint(num_labels, (len(samples),), generator=generator)
    device = model_device(model)
    model.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = range(start, min(len(samples), start + batch_size))
            variants = [
                make_variant(
                    as_float_image(samples[i][1]), task, int(labels[i]), perm_set, samples[i][0]
                )
                for i in chunk
            ]
            x, v = collate(variants)
            logits = forward_auxiliary(model, x.to(device)).pretext_logits
            correct += int((logits.argmax(dim=1).cpu() == v).sum())
    return correct / len(samples)


class LabeledImages(Dataset[Batch]):
    """Map-style view of a labeled set: one uint8 image and its label per index."""

    def __init__(self, labeled: LabeledSet) -> None:
        self.labeled = labeled

    def __len__(self) -> int:
        return len(self.labeled)

    def __getitem__(self, index: int) -> Batch:
        return self.labeled.images[index], self.labeled.labels[index]


class SelfSupervisedBatches(Dataset[tuple[Tensor, Tensor, list[str]]]):
    """One epoch of self-supervised batches, item ``step`` being the batch of that step.

    Every batch is drawn from its own derived seed, so worker count and
    fetch order leave the contents unchanged.
    """

    def __init__(
        self,
        samples: Sequence[Sample],
        task: Task,
        perm_set: PermutationSet | None,
        batch_size: int,
        steps: int,
        seed: int,
        epoch: int,
        augment_config: AugmentConfig,
    ) -> None:
        self.samples = list(samples)
        self.task = task
        self.perm_set = perm_set
        self.batch_size = batch_size
        self.steps = steps
        self.seed = seed
        self.epoch = epoch
        self.augment_config = augment_config

    def __len__(self) -> int:
        return self.steps

    def __getitem__(self, step: int) -> tuple[Tensor, Tensor, list[str]]:
        variants = make_ss_batch(
            self.samples,
            self.task,
            self.perm_set,
            self.batch_size,
            derive_seed(self.seed, "aux", self.epoch, step),
            self.augment_config,
        )
        x, v = collate(variants)
        return x, v, [variant.source_id for variant in variants]


def primary_loader(
    labeled: LabeledSet, batch_size: int, seed: int, epoch: int
) -> DataLoader[Batch]:
    """Shuffled (image, label) batches in an order fixed by ``seed`` and ``epoch``."""
    return DataLoader(
        LabeledImages(labeled),
        batch_size=batch_size,
        shuffle=True,
        generator=generator_for(seed, "shuffle", epoch),
    )


def auxiliary_loader(
    batches: SelfSupervisedBatches, workers: int
) -> DataLoader[tuple[Tensor, Tensor, list[str]]]:
    """Batches in step order, built by ``workers`` processes ahead of the trainer."""
    return DataLoader(
        batches,
        batch_size=None,
        num_workers=workers,
        generator=generator_for(batches.seed, "aux-loader", batches.epoch),
    )


def _augment_batch(images: Tensor, config: AugmentConfig, generator: torch.Generator) -> Tensor:
    if not config.enabled and images.shape[-1] == config.crop_size:
        return images
    return torch.stack([augment(image, config, generator) for image in images])


def _check_inputs(
    config: TrainConfig,
    aux: DomainDataset | UnlabeledPool | None,
    perm_set: PermutationSet | None,
) -> None:
    if config.mode in {"dg", "null_hypothesis"} and aux is not None:
        msg = f"mode {config.mode} trains on labeled sources only; got auxiliary data"
        raise ProtocolError(msg)
    if config.mode in {"da", "pda"} and aux is None:
        kind = "target" if config.mode == "da" else "auxiliary"
        msg = f"mode {config.mode} needs unlabeled {kind} data"
        raise ProtocolError(msg)
    if config.uses_auxiliary and config.task == "jigsaw" and perm_set is None:
        msg = "the jigsaw task needs a permutation set"
        raise ConfigError(msg)


def _split_pool(
    pool: UnlabeledPool, fraction: float, seed: int
) -> tuple[UnlabeledPool, UnlabeledPool]:
    """Held-out part of the target pool for self-supervised validation."""
    if len(pool) < 2:  # noqa: PLR2004
        logger.warning(
            "Target pool has %d image(s); self-supervised validation reuses the training images",
            len(pool),
        )
        return pool, pool
    order = torch.randperm(len(pool), generator=torch.Generator().manual_seed(seed)).tolist()
    n_val = max(1, math.floor(len(pool) * fraction + 0.5))
    parts = []
    for index in (sorted(order[n_val:]), sorted(order[:n_val])):
        parts.append(
            UnlabeledPool(
                refs=tuple(pool.refs[i] for i in index),
                domains=tuple(pool.domains[i] for i in index),
                images=pool.images[index],
            )
        )
    return parts[0], parts[1]


def _num_pretext(config: TrainConfig, perm_set: PermutationSet | None) -> int:
    if config.task == "rotation":
        return ROTATION_CLASSES
    return perm_set.size if perm_set is not None else config.num_permutations


@dataclass
class _Sources:
    train: LabeledSet
    val: LabeledSet
    aux_train: list[Sample]
    aux_val: list[Sample]


def _prepare_sources(
    config: TrainConfig, sources: DomainDataset, aux: DomainDataset | UnlabeledPool | None
) -> _Sources:
    if config.train_list is not None and config.val_list is not None:
        train_ds, val_ds = apply_split_lists(
            sources, config.train_list, config.val_list, strict=False
        )
    else:
        train_ds, val_ds = split(sources, config.val_fraction, derive_seed(config.seed, "split"))
    train, val = train_ds.labeled(), val_ds.labeled()
    if len(train) == 0:
        msg = "no labeled source images to train on"
        raise ProtocolError(msg)

    if config.mode == "dg":
        return _Sources(train, val, train.samples(), [])
    if aux is None:
        return _Sources(train, val, [], [])
    pool = aux if isinstance(aux, UnlabeledPool) else aux.unlabeled()
    if len(pool) == 0:
        msg = "the auxiliary pool is empty"
        raise ProtocolError(msg)
    if config.mode == "da":
        seed = derive_seed(config.seed, "aux-split")
        aux_train, aux_val = _split_pool(pool, config.val_fraction, seed)
        return _Sources(train, val, aux_train.samples(), aux_val.samples())
    return _Sources(train, val, pool.samples(), [])


def _validate(state: TrainState, data: _Sources, perm_set: PermutationSet | None) -> float:
    config = state.config
    if config.mode == "da":
        return pretext_accuracy(
            state.model,
            data.aux_val,
            config.task,
            perm_set,
            derive_seed(config.seed, "aux-val"),
            config.eval_batch_size,
        )
    if len(data.val) == 0:
        logger.warning("Validation split is empty; selecting on training accuracy")
        return evaluate(state.model, data.train, config.eval_batch_size)
    return evaluate(state.model, data.val, config.eval_batch_size)


def _run_epoch(
    state: TrainState,
    data: _Sources,
    perm_set: PermutationSet | None,
    on_aux_batch: AuxTap | None,
) -> tuple[float, float]:
    config = state.config
    epoch = state.epoch
    augment_config = config.augment_config()
    primary = primary_loader(data.train, config.batch_size_primary, config.seed, epoch)

    stream = None
    if config.uses_auxiliary and data.aux_train:
        batches = SelfSupervisedBatches(
            data.aux_train,
            config.task,
            perm_set,
            config.batch_size_auxiliary,
            len(primary),
            config.seed,
            epoch,
            augment_config,
        )
        stream = iter(auxiliary_loader(batches, config.loader_workers))

    losses_p: list[float] = []
    losses_a: list[float] = []
    for step, (images, y) in enumerate(primary):
        generator = generator_for(config.seed, "augment", epoch, step)
        x = _augment_batch(as_float_image(images), augment_config, generator)
        aux = None
        if stream is not None:
            x_aux, v, source_ids = next(stream)
            aux = (x_aux, v)
            if on_aux_batch is not None:
                on_aux_batch(source_ids)
        _, losses = train_step(state, (x, y), aux, batch_id=f"epoch{epoch}-step{step}")
        losses_p.append(losses.primary)
        if losses.auxiliary is not None:
            losses_a.append(losses.auxiliary)

    mean_a = math.fsum(losses_a) / len(losses_a) if losses_a else 0.0
    return math.fsum(losses_p) / len(losses_p), mean_a


def fit(
    config: TrainConfig,
    sources: DomainDataset,
    target_or_aux: DomainDataset | UnlabeledPool | None = None,
    perm_set: PermutationSet | None = None,
    on_aux_batch: AuxTap | None = None,
    model: GeosNet | None = None,
) -> TrainState:
    """Train per ``config.mode`` and return the state holding the best epoch's weights.

    dg and null_hypothesis train on labeled ``sources`` only; da draws the
    auxiliary task from the unlabeled target; pda from the unlabeled auxiliary
    domains. Selection uses primary accuracy on the source validation split,
    except in da mode where it uses pretext accuracy on held-out target images.

    Raises:
        ProtocolError: if the inputs do not fit the mode
        ConfigError: if the jigsaw task has no permutation set
        DivergenceError: if a loss becomes non-finite
    """
    _check_inputs(config, target_or_aux, perm_set)
    data = _prepare_sources(config, sources, target_or_aux)
    if model is None:
        model = build(config.network_config(sources.num_classes, _num_pretext(config, perm_set)))
    state = init_state(model, config)
    state.train_refs = frozenset(data.train.refs)
    state.val_refs = frozenset(data.val.refs)
    state.aux_refs = frozenset(ref for ref, _ in data.aux_train) | frozenset(
        ref for ref, _ in data.aux_val
    )

    for epoch in range(1, config.epochs + 1):
        state.epoch = epoch
        lr = state.optimizer.param_groups[0]["lr"]
        loss_p, loss_a = _run_epoch(state, data, perm_set, on_aux_batch)
        if state.scheduler is not None:
            state.scheduler.step()
        metric = _validate(state, data, perm_set)
        improved = state.remember_best(metric)
        state.history.append(
            EpochRecord(
                epoch=epoch, loss_primary=loss_p, loss_auxiliary=loss_a, val_metric=metric, lr=lr
            )
        )
        logger.info(
            "epoch %d/%d L_p=%.4f L_a=%.4f val=%.4f%s",
            epoch,
            config.epochs,
            loss_p,
            loss_a,
            metric,
            " *" if improved else "",
        )

    state.load_best()
    return state
