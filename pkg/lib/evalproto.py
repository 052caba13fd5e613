"""Evaluation protocols: leave-one-domain-out, multi-source DA and PDA pair sweeps."""

from __future__ import annotations

import io
import itertools
import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from lib.datasets import DomainDataset, LabeledSet, UnlabeledPool
from lib.errors import (
    DivergenceError,
    EmptyResultError,
    ProtocolError,
    UsageError,
)
from lib.models import (
    Method,
    Mode,
    OSConfig,
    ProtocolName,
    ProtocolResult,
    ProtocolRow,
    ProtocolSpec,
    ReferenceRow,
    Task,
    TrainConfig,
)
from lib.osadapt import adapt_batch
from lib.permset import PermutationSet, generate
from lib.seeding import derive_seed
from lib.storage import GAINS_MD, RESULT_CSV, RESULT_MD, RunStore
from lib.trainer import evaluate, fit

logger = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "protocol",
    "target",
    "method",
    "os_iterations",
    "run",
    "seed",
    "accuracy",
    "status",
)
REPORT_FORMATS = ("csv", "md")
PAIR_SEPARATOR = "->"

_PROTOCOL_MODE: dict[ProtocolName, Mode] = {"dg_loo": "dg", "da_multi": "da", "pda_pairs": "pda"}
_PLAIN_OF: dict[Method, Method] = {"geos": "ges", "geos_rotation": "ges_rotation"}

# Published numbers, kept for side-by-side tables only.
PUBLISHED_REFERENCES: tuple[ReferenceRow, ...] = (
    *(
        ReferenceRow(label="GeOS (PACS, ResNet-18)", protocol="dg_loo", target=t, accuracy=a)
        for t, a in (
            ("art_painting", 0.7979),
            ("cartoon", 0.7506),
            ("sketch", 0.760),
            ("photo", 0.9665),
            ("Avg", 0.8188),
        )
    ),
    *(
        ReferenceRow(label="GeS (PACS, ResNet-18)", protocol="da_multi", target=t, accuracy=a)
        for t, a in (
            ("art_painting", 0.8096),
            ("cartoon", 0.7756),
            ("sketch", 0.7878),
            ("photo", 0.9739),
            ("Avg", 0.8367),
        )
    ),
    ReferenceRow(label="Deep All (PACS)", protocol="da_multi", target="Avg", accuracy=0.7905),
    ReferenceRow(label="GeS (CompCars)", protocol="pda_pairs", target="Avg", accuracy=0.602),
    ReferenceRow(label="Baseline (CompCars)", protocol="pda_pairs", target="Avg", accuracy=0.568),
    ReferenceRow(
        label="AdaGraph (CompCars)",
        protocol="pda_pairs",
        target="Avg",
        accuracy=0.651,
        note="final version; an earlier draft reports 58.8",
    ),
    ReferenceRow(
        label="AdaGraph (CompCars)",
        protocol="pda_pairs",
        target="Avg",
        accuracy=0.588,
        note="earlier draft; the final version reports 65.1",
    ),
    *(
        ReferenceRow(
            label=f"GeS (Portraits {split})", protocol="pda_pairs", target="Avg", accuracy=a
        )
        for split, a in (("decades", 0.871), ("regions", 0.916))
    ),
)


@dataclass(frozen=True)
class Cell:
    """One (target, repetition) unit of a protocol with its derived seed."""

    target: str
    run: int
    seed: int
    source: str | None = None

    @property
    def label(self) -> str:
        if self.source is None:
            return self.target
        return f"{self.source}{PAIR_SEPARATOR}{self.target}"


@dataclass
class CellInputs:
    """What a cell trains and tests on; ``aux`` never carries labels."""

    sources: DomainDataset
    aux: UnlabeledPool | None
    test: LabeledSet
    forbidden_refs: frozenset[str] = frozenset()
    aux_refs: frozenset[str] = frozenset()


@dataclass
class CellOutcome:
    rows: list[ProtocolRow] = field(default_factory=list)
    audits: list[str] = field(default_factory=list)


def _task_methods(methods: Sequence[Method]) -> list[tuple[Task, bool]]:
    """(task, adapt) for every pretext task the methods need.

    Adapted methods always report their it=0 row too; it is the plain score.
    """
    groups: list[tuple[Task, bool]] = []
    if "ges" in methods or "geos" in methods:
        groups.append(("jigsaw", "geos" in methods))
    if "ges_rotation" in methods or "geos_rotation" in methods:
        groups.append(("rotation", "geos_rotation" in methods))
    return groups


def _failed_rows(
    protocol: ProtocolName, cell: Cell, methods: Sequence[tuple[Method, int]]
) -> list[ProtocolRow]:
    return [
        ProtocolRow(
            protocol=protocol,
            target=cell.label,
            source=cell.source,
            method=method,
            os_iterations=k,
            run=cell.run,
            seed=cell.seed,
            status="failed",
        )
        for method, k in methods
    ]


class ProtocolRunner:
    """Trains and scores every cell of one protocol."""

    def __init__(
        self,
        protocol: ProtocolName,
        spec: ProtocolSpec,
        perm_set: PermutationSet | None = None,
    ) -> None:
        self.protocol = protocol
        self.spec = spec
        self.mode = _PROTOCOL_MODE[protocol]
        needs_jigsaw = any(m in spec.methods for m in ("ges", "geos", "null"))
        if perm_set is None and needs_jigsaw:
            train = spec.train
            perm_set = generate(
                train.grid_side**2, train.num_permutations, derive_seed(spec.seed, "perms")
            )
        self.perm_set = perm_set

    def cells(self, targets: Sequence[tuple[str | None, str]]) -> list[Cell]:
        return [
            Cell(
                target=target,
                source=source,
                run=run,
                seed=derive_seed(self.spec.seed, self.protocol, source or "", target, run),
            )
            for source, target in targets
            for run in range(self.spec.repetitions)
        ]

    def _config(self, cell: Cell, mode: Mode, task: Task) -> TrainConfig:
        return self.spec.train.model_copy(update={"mode": mode, "task": task, "seed": cell.seed})

    def _audit(self, cell: Cell, inputs: CellInputs, seen: frozenset[str], what: str) -> str:
        leaked = seen & inputs.forbidden_refs
        if leaked:
            msg = (
                f"{self.protocol} {cell.label} run {cell.run}: "
                f"{len(leaked)} held-out refs in {what}"
            )
            raise ProtocolError(msg)
        return f"{self.protocol} {cell.label} run {cell.run} {what}: no held-out refs"

    def run_cell(self, cell: Cell, inputs: CellInputs) -> CellOutcome:
        """Train each requested variant for one cell and score it on the test set."""
        outcome = CellOutcome()
        methods = self.spec.methods

        if "null" in methods:
            try:
                config = self._config(cell, "null_hypothesis", "jigsaw")
                state = fit(config, inputs.sources, None, self.perm_set)
                outcome.audits.append(
                    self._audit(cell, inputs, state.train_refs | state.val_refs, "null training")
                )
                accuracy = evaluate(state.model, inputs.test, config.eval_batch_size)
                outcome.rows.append(
                    ProtocolRow(
                        protocol=self.protocol,
                        target=cell.label,
                        source=cell.source,
                        method="null",
                        os_iterations=0,
                        run=cell.run,
                        seed=cell.seed,
                        accuracy=accuracy,
                    )
                )
            except DivergenceError as e:
                logger.error("Cell %s run %d (null) failed: %s", cell.label, cell.run, e)
                outcome.rows.extend(_failed_rows(self.protocol, cell, [("null", 0)]))

        for task, adapted in _task_methods(methods):
            rotation = task == "rotation"
            max_k = self.spec.rotation_os_iterations if rotation else self.spec.os_max_iterations
            expected: list[tuple[Method, int]] = [
                ("ges_rotation" if rotation else "ges", 0),
                *(("geos_rotation" if rotation else "geos", k) for k in range(1, max_k + 1)),
            ]
            if not adapted:
                expected = expected[:1]
            try:
                outcome.rows.extend(self._run_task(cell, inputs, task, adapted, max_k, outcome))
            except DivergenceError as e:
                logger.error("Cell %s run %d (%s) failed: %s", cell.label, cell.run, task, e)
                outcome.rows.extend(_failed_rows(self.protocol, cell, expected))
        return outcome

    def _run_task(
        self,
        cell: Cell,
        inputs: CellInputs,
        task: Task,
        adapted: bool,
        max_k: int,
        outcome: CellOutcome,
    ) -> list[ProtocolRow]:
        config = self._config(cell, self.mode, task)
        perm_set = self.perm_set if task == "jigsaw" else None
        checked = 0

        def tap(source_ids: Sequence[str]) -> None:
            nonlocal checked
            if self.mode == "da" and not set(source_ids) <= inputs.aux_refs:
                msg = f"auxiliary batch of {cell.label} holds images outside the target"
                raise ProtocolError(msg)
            checked += 1

        state = fit(config, inputs.sources, inputs.aux, perm_set, on_aux_batch=tap)
        outcome.audits.append(
            self._audit(cell, inputs, state.train_refs | state.val_refs, f"{task} training")
        )
        if self.mode == "da":
            outcome.audits.append(
                f"{self.protocol} {cell.label} run {cell.run} {task}: "
                f"{checked} auxiliary batches drawn from the target only"
            )
        if self.mode == "pda" and inputs.aux is not None:
            outcome.audits.append(
                f"{self.protocol} {cell.label} run {cell.run} {task}: "
                f"{len(inputs.aux)} auxiliary images passed without labels"
            )

        rotation = task == "rotation"
        if not adapted:
            accuracy = evaluate(state.model, inputs.test, config.eval_batch_size)
            return [
                ProtocolRow(
                    protocol=self.protocol,
                    target=cell.label,
                    source=cell.source,
                    method="ges_rotation" if rotation else "ges",
                    os_iterations=0,
                    run=cell.run,
                    seed=cell.seed,
                    accuracy=accuracy,
                )
            ]
        os_config = OSConfig(
            iterations=max_k,
            batch_size=self.spec.os_batch_size,
            seed=derive_seed(cell.seed, "os"),
        ).resolve(config)
        sweep = adapt_batch(state.model, inputs.test, os_config, perm_set)
        return sweep.rows(self.protocol, cell.label, cell.run, cell.seed, rotation, cell.source)

    def run(
        self, cells: Sequence[Cell], inputs_for: Callable[[Cell], CellInputs]
    ) -> ProtocolResult:
        """Run every cell, in parallel when ``jobs`` > 1; rows keep cell order."""

        def work(cell: Cell) -> CellOutcome:
            logger.info("Cell %s run %d started", cell.label, cell.run)
            outcome = self.run_cell(cell, inputs_for(cell))
            logger.info("Cell %s run %d finished", cell.label, cell.run)
            return outcome

        if self.spec.jobs > 1 and len(cells) > 1:
            with ThreadPoolExecutor(max_workers=self.spec.jobs) as pool:
                outcomes = list(pool.map(work, cells))
        else:
            outcomes = [work(cell) for cell in cells]

        result = ProtocolResult(protocol=self.protocol)
        for outcome in outcomes:
            result.rows.extend(outcome.rows)
            result.audits.extend(outcome.audits)
        return result


def run_dg_loo(
    dataset: DomainDataset, spec: ProtocolSpec, perm_set: PermutationSet | None = None
) -> ProtocolResult:
    """Hold out each domain in turn and train on the rest.

    Raises:
        ProtocolError: with fewer than two domains
    """
    domains = dataset.domain_names
    if len(domains) < 2:  # noqa: PLR2004
        msg = f"leave-one-domain-out needs at least 2 domains, got {len(domains)}"
        raise ProtocolError(msg)
    runner = ProtocolRunner("dg_loo", spec, perm_set)

    def inputs_for(cell: Cell) -> CellInputs:
        return CellInputs(
            sources=dataset.subset(d for d in domains if d != cell.target),
            aux=None,
            test=dataset.labeled([cell.target]),
            forbidden_refs=frozenset(dataset.refs([cell.target])),
        )

    return runner.run(runner.cells([(None, t) for t in domains]), inputs_for)


def _da_inputs(dataset: DomainDataset, cell: Cell) -> CellInputs:
    target_refs = frozenset(dataset.refs([cell.target]))
    return CellInputs(
        sources=dataset.subset(d for d in dataset.domain_names if d != cell.target),
        aux=dataset.unlabeled([cell.target]),
        test=dataset.labeled([cell.target]),
        forbidden_refs=target_refs,
        aux_refs=target_refs,
    )


def run_da(
    dataset: DomainDataset,
    target_name: str,
    spec: ProtocolSpec,
    perm_set: PermutationSet | None = None,
) -> ProtocolResult:
    """Multi-source DA on one target: labeled sources, unlabeled target for the pretext task.

    Raises:
        ProtocolError: if the target is unknown or leaves no source domain
    """
    if target_name not in dataset.domains:
        msg = f"unknown target domain {target_name!r}"
        raise ProtocolError(msg)
    if len(dataset.domains) < 2:  # noqa: PLR2004
        msg = "domain adaptation needs at least one source domain besides the target"
        raise ProtocolError(msg)
    runner = ProtocolRunner("da_multi", spec, perm_set)
    return runner.run(runner.cells([(None, target_name)]), lambda c: _da_inputs(dataset, c))


def run_da_multi(
    dataset: DomainDataset, spec: ProtocolSpec, perm_set: PermutationSet | None = None
) -> ProtocolResult:
    """``run_da`` with every domain taking a turn as the target."""
    if len(dataset.domains) < 2:  # noqa: PLR2004
        msg = "domain adaptation needs at least one source domain besides the target"
        raise ProtocolError(msg)
    runner = ProtocolRunner("da_multi", spec, perm_set)
    cells = runner.cells([(None, t) for t in dataset.domain_names])
    return runner.run(cells, lambda c: _da_inputs(dataset, c))


def select_pairs(domains: Sequence[str], spec: ProtocolSpec) -> list[tuple[str, str]]:
    """Ordered (source, target) pairs; without ``full_sweep`` at most ``max_pairs`` of them."""
    pairs = list(itertools.permutations(domains, 2))
    if spec.full_sweep or len(pairs) <= spec.max_pairs:
        return pairs
    rng = np.random.default_rng(derive_seed(spec.seed, "pairs"))
    keep = sorted(rng.choice(len(pairs), size=spec.max_pairs, replace=False).tolist())
    logger.warning(
        "Running %d of %d domain pairs; pass --full-sweep to run all of them",
        spec.max_pairs,
        len(pairs),
    )
    return [pairs[i] for i in keep]


def run_pda(
    dataset: DomainDataset, spec: ProtocolSpec, perm_set: PermutationSet | None = None
) -> ProtocolResult:
    """Train on one labeled source with every other domain as unlabeled auxiliary data.

    Raises:
        ProtocolError: with fewer than three domains
    """
    domains = dataset.domain_names
    if len(domains) < 3:  # noqa: PLR2004
        msg = f"predictive DA needs at least 3 domains, got {len(domains)}"
        raise ProtocolError(msg)
    pairs = select_pairs(domains, spec)
    runner = ProtocolRunner("pda_pairs", spec, perm_set)

    def inputs_for(cell: Cell) -> CellInputs:
        assert cell.source is not None
        auxiliary = [d for d in domains if d not in {cell.source, cell.target}]
        return CellInputs(
            sources=dataset.subset([cell.source]),
            aux=dataset.unlabeled(auxiliary),
            test=dataset.labeled([cell.target]),
            forbidden_refs=frozenset(dataset.refs([cell.target])),
        )

    result = runner.run(runner.cells(pairs), inputs_for)
    total = len(list(itertools.permutations(domains, 2)))
    if len(pairs) < total:
        result.audits.append(f"pda_pairs: subsampled {len(pairs)} of {total} pairs")
    return result


def render_csv(result: ProtocolResult) -> str:
    frame = pd.DataFrame(
        [row.model_dump(include=set(REPORT_COLUMNS)) for row in result.rows],
        columns=list(REPORT_COLUMNS),
    )
    return str(frame.to_csv(index=False, lineterminator="\n", na_rep=""))


def parse_csv(text: str) -> ProtocolResult:
    """Inverse of ``render_csv``.

    Raises:
        EmptyResultError: if the document has no rows
    """
    try:
        frame = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        frame = pd.DataFrame()
    if frame.empty:
        msg = "result file holds no rows"
        raise EmptyResultError(msg)
    rows = []
    for record in frame.to_dict(orient="records"):
        target = record["target"]
        source = target.split(PAIR_SEPARATOR)[0] if PAIR_SEPARATOR in target else None
        rows.append(
            ProtocolRow(
                protocol=record["protocol"],
                target=target,
                source=source,
                method=record["method"],
                os_iterations=int(record["os_iterations"]),
                run=int(record["run"]),
                seed=int(record["seed"]),
                accuracy=float(record["accuracy"]) if record["accuracy"] else None,
                status=record["status"],
            )
        )
    return ProtocolResult(protocol=rows[0].protocol, rows=rows)


def load_result(path: Path) -> ProtocolResult:
    return parse_csv(path.read_text(encoding="utf-8"))


def _pct(value: float | None) -> str:
    return "–" if value is None else f"{100 * value:.2f}"


def _markdown(frame: pd.DataFrame) -> str:
    return str(frame.to_markdown(index=False, disable_numparse=True))


def render_markdown(result: ProtocolResult, with_references: bool = False) -> str:
    """Table with one column per target plus Avg; pda results collapse to the grand mean."""
    aggregates = result.aggregate()
    if result.protocol == "pda_pairs":
        table = pd.DataFrame(
            [[a.label, str(len(a.per_target)), _pct(a.average)] for a in aggregates],
            columns=["Method", "Pairs", "Avg"],
        )
    else:
        targets = result.targets
        table = pd.DataFrame(
            [
                [a.label, *(_pct(a.per_target.get(t)) for t in targets), _pct(a.average)]
                for a in aggregates
            ],
            columns=["Method", *targets, "Avg"],
        )
    lines = [f"# {result.protocol}", "", _markdown(table)]
    if result.failed:
        count = sum(row.status == "failed" for row in result.rows)
        lines += ["", f"{count} row(s) failed and are excluded from the means."]

    if with_references:
        references = result.references or [
            r for r in PUBLISHED_REFERENCES if r.protocol == result.protocol
        ]
        if references:
            published = pd.DataFrame(
                [[r.label, r.target, _pct(r.accuracy), r.note] for r in references],
                columns=["Method", "Target", "Accuracy", "Note"],
            )
            lines += ["", "## Published references", "", _markdown(published)]
    return "\n".join(lines) + "\n"


def iteration_gains(result: ProtocolResult) -> dict[tuple[Method, int], list[float]]:
    """Per adapted method and run: mean over targets of acc(it=k) − acc(it=0), for k = 1..max."""
    frame = result.ok_frame()
    plain = frame.loc[frame["os_iterations"] == 0, ["method", "target", "run", "accuracy"]]
    plain = plain.rename(columns={"method": "plain", "accuracy": "base"})
    adapted = frame[frame["method"].isin(list(_PLAIN_OF))].assign(
        plain=lambda f: f["method"].map(_PLAIN_OF)
    )
    merged = adapted.merge(plain, on=["plain", "target", "run"])
    if merged.empty:
        return {}
    merged["gain"] = merged["accuracy"] - merged["base"]
    means = merged.groupby(["method", "run", "os_iterations"])["gain"].mean()
    return {
        (method, int(run)): [float(v) for v in per_k.sort_index().tolist()]
        for (method, run), per_k in means.groupby(level=[0, 1])
    }


def render_gains(result: ProtocolResult) -> str:
    gains = iteration_gains(result)
    width = max((len(values) for values in gains.values()), default=0)
    table = pd.DataFrame(
        [
            [method, str(run), *(f"{100 * v:+.2f}" for v in values)]
            + [""] * (width - len(values))
            for (method, run), values in gains.items()
        ],
        columns=["Method", "Run", *(f"it={k}" for k in range(1, width + 1))],
    )
    lines = [f"# {result.protocol}: accuracy gain over it=0 (points)", "", _markdown(table)]
    return "\n".join(lines) + "\n"


def emit_report(
    result: ProtocolResult,
    store: RunStore,
    fmt: str = "csv",
    gains: bool = False,
    with_references: bool = False,
) -> list[Path]:
    """Write the CSV report, plus markdown for ``fmt="md"`` and the gains table on request.

    Raises:
        UsageError: on an unknown format
        EmptyResultError: if the result has no rows
    """
    if fmt not in REPORT_FORMATS:
        msg = f"unknown report format {fmt!r}; choose from {', '.join(REPORT_FORMATS)}"
        raise UsageError(msg)
    if not result.rows:
        msg = "nothing to report: the result has no rows"
        raise EmptyResultError(msg)
    written = [store.write_text(RESULT_CSV, render_csv(result))]
    if fmt == "md":
        written.append(store.write_text(RESULT_MD, render_markdown(result, with_references)))
    if gains:
        written.append(store.write_text(GAINS_MD, render_gains(result)))
    return written
