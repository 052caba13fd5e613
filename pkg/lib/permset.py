"""Jigsaw permutation sets chosen by greedy maximal Hamming distance."""

from __future__ import annotations

import hashlib
import itertools
import logging
import math
import re
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import torch

from lib.errors import (
    InfeasibleSetError,
    InvalidGridError,
    InvalidPairError,
    PermutationError,
    PermutationParseError,
    UnknownPermutationError,
)

logger = logging.getLogger(__name__)

Permutation = tuple[int, ...]

EXHAUSTIVE_POOL_LIMIT = 10**6
SAMPLED_POOL_SIZE = 10**5

_HEADER = re.compile(r"^n=(\d+) V=(\d+) seed=(-?\d+)$")


def hamming(a: Sequence[int], b: Sequence[int]) -> int:
    """Count the positions where two permutations differ.

    Raises:
        InvalidPairError: if the permutations have different sizes
    """
    if len(a) != len(b):
        msg = f"cannot compare permutations of {len(a)} and {len(b)} elements"
        raise InvalidPairError(msg)
    return sum(x != y for x, y in zip(a, b, strict=True))


def min_pairwise_hamming(permutations: Sequence[Sequence[int]]) -> int:
    """Brute-force minimum Hamming distance over all pairs.

    A single permutation has no pairs; its vacuous minimum is reported as n.
    """
    rows = np.asarray(permutations, dtype=np.int64)
    if len(rows) < 2:  # noqa: PLR2004
        return int(rows.shape[1]) if rows.ndim == 2 else 0  # noqa: PLR2004
    distances = pairwise_hamming_matrix(rows)
    np.fill_diagonal(distances, rows.shape[1] + 1)
    return int(distances.min())


def pairwise_hamming_matrix(permutations: Sequence[Sequence[int]] | np.ndarray) -> np.ndarray:
    """V×V matrix of Hamming distances."""
    rows = np.asarray(permutations)
    return (rows[:, None, :] != rows[None, :, :]).sum(axis=-1)


def _check_permutation(values: Sequence[int], n: int) -> str | None:
    """Return why ``values`` is not a permutation of range(n), or None."""
    if len(values) != n:
        return f"expected {n} indices, found {len(values)}"
    if sorted(values) != list(range(n)):
        return f"not a permutation of 0..{n - 1}: {' '.join(map(str, values))}"
    return None


@dataclass(frozen=True)
class PermutationSet:
    """The V jigsaw permutations of n tiles, in label order."""

    n: int
    permutations: tuple[Permutation, ...]
    seed: int
    min_pairwise_hamming: int = field(default=-1)

    def __post_init__(self) -> None:
        for perm in self.permutations:
            if reason := _check_permutation(perm, self.n):
                raise PermutationError(reason)
        if len(set(self.permutations)) != len(self.permutations):
            msg = "permutations must be pairwise distinct"
            raise PermutationError(msg)
        if not 1 <= len(self.permutations) <= math.factorial(self.n):
            raise InfeasibleSetError(len(self.permutations), self.n, math.factorial(self.n))
        if self.min_pairwise_hamming < 0:
            object.__setattr__(
                self, "min_pairwise_hamming", min_pairwise_hamming(self.permutations)
            )

    def __len__(self) -> int:
        return len(self.permutations)

    @property
    def size(self) -> int:
        """V, the number of pretext classes."""
        return len(self.permutations)

    @cached_property
    def _labels(self) -> dict[Permutation, int]:
        return {perm: label for label, perm in enumerate(self.permutations)}

    def index(self, perm: Sequence[int]) -> int:
        """Label of ``perm`` within the set.

        Raises:
            UnknownPermutationError: if ``perm`` is not in the set
        """
        key = tuple(int(v) for v in perm)
        if key not in self._labels:
            msg = f"permutation {key} is not in the active set"
            raise UnknownPermutationError(msg)
        return self._labels[key]

    def inverse(self, label: int) -> Permutation:
        """Permutation undoing the scramble of ``label``."""
        return tuple(int(v) for v in np.argsort(self.permutations[label]))

    @property
    def grid_side(self) -> int:
        """Side of the square grid the tiles fill.

        Raises:
            InvalidGridError: if n is not a perfect square
        """
        side = math.isqrt(self.n)
        if side * side != self.n:
            msg = f"{self.n} tiles do not fill a square grid"
            raise InvalidGridError(msg)
        return side

    def as_tensor(self) -> torch.Tensor:
        """V×n index tensor."""
        return torch.tensor(self.permutations, dtype=torch.long)

    def to_text(self) -> str:
        """Serialize in the permutation-set file format."""
        header = f"n={self.n} V={self.size} seed={self.seed}"
        rows = (" ".join(str(v) for v in perm) for perm in self.permutations)
        return "\n".join([header, *rows]) + "\n"

    def digest(self) -> str:
        """SHA-256 of the serialized set."""
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def _select_exhaustive(n: int, count: int, rng: np.random.Generator) -> list[Permutation]:
    # itertools yields lexicographic order, so argmax breaks ties towards the smallest
    pool = np.array(list(itertools.permutations(range(n))), dtype=np.int8)
    chosen = [int(rng.integers(len(pool)))]
    min_dist = (pool != pool[chosen[0]]).sum(axis=1)
    while len(chosen) < count:
        best = int(np.argmax(min_dist))
        chosen.append(best)
        np.minimum(min_dist, (pool != pool[best]).sum(axis=1), out=min_dist)
    return [tuple(int(v) for v in pool[i]) for i in chosen]


def _select_sampled(n: int, count: int, rng: np.random.Generator) -> list[Permutation]:
    chosen = [rng.permutation(n)]
    while len(chosen) < count:
        pool = rng.permuted(np.tile(np.arange(n), (SAMPLED_POOL_SIZE, 1)), axis=1)
        min_dist = np.full(len(pool), n)
        for perm in chosen:
            np.minimum(min_dist, (pool != perm).sum(axis=1), out=min_dist)
        best = min_dist.max()
        if best == 0:
            continue
        ties = pool[min_dist == best]
        first = np.lexsort(ties.T[::-1])[0]
        chosen.append(ties[first])
    return [tuple(int(v) for v in perm) for perm in chosen]


def generate(n: int, count: int, seed: int) -> PermutationSet:
    """Select ``count`` permutations of ``n`` tiles by greedy max-min Hamming distance.

    The first permutation is drawn at random from the seed; every further one
    maximizes its minimum distance to those already selected. The candidate pool
    is the whole symmetric group when n! <= 10**6, otherwise a fresh random sample
    of 10**5 permutations per step.

    Raises:
        InvalidGridError: if n < 2
        InfeasibleSetError: if count > n!
    """
    if n < 2:  # noqa: PLR2004
        msg = f"a jigsaw needs at least 2 tiles, got {n}"
        raise InvalidGridError(msg)
    total = math.factorial(n)
    if count < 1:
        msg = f"set size must be at least 1, got {count}"
        raise PermutationError(msg)
    if count > total:
        raise InfeasibleSetError(count, n, total)

    rng = np.random.default_rng(seed)
    if total <= EXHAUSTIVE_POOL_LIMIT:
        selected = _select_exhaustive(n, count, rng)
    else:
        selected = _select_sampled(n, count, rng)

    perm_set = PermutationSet(n=n, permutations=tuple(selected), seed=seed)
    logger.info(
        "Selected %d permutations of %d tiles (min pairwise Hamming %d)",
        perm_set.size,
        n,
        perm_set.min_pairwise_hamming,
    )
    return perm_set


def save(perm_set: PermutationSet, path: Path) -> None:
    """Write a permutation-set file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(perm_set.to_text(), encoding="utf-8")


def _parse_header(line: str) -> tuple[int, int, int]:
    match = _HEADER.match(line.strip())
    if not match:
        raise PermutationParseError(1, f"expected header 'n=<n> V=<V> seed=<seed>', got {line!r}")
    n, count, seed = (int(group) for group in match.groups())
    return n, count, seed


def _parse_row(line: str, line_no: int, n: int) -> Permutation:
    try:
        values = tuple(int(token) for token in line.split())
    except ValueError:
        raise PermutationParseError(line_no, f"non-integer entry in {line!r}") from None
    if reason := _check_permutation(values, n):
        raise PermutationParseError(line_no, reason)
    return values


def parse(text: str) -> PermutationSet:
    """Parse the permutation-set file format.

    Raises:
        PermutationParseError: naming the first offending line
    """
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise PermutationParseError(1, "empty file")

    n, count, seed = _parse_header(lines[0])
    rows = lines[1:]
    if len(rows) != count:
        raise PermutationParseError(
            min(len(rows), count) + 2, f"header declares {count} rows, found {len(rows)}"
        )

    seen: dict[Permutation, int] = {}
    for line_no, line in enumerate(rows, start=2):
        perm = _parse_row(line, line_no, n)
        if perm in seen:
            raise PermutationParseError(line_no, f"duplicate of line {seen[perm]}")
        seen[perm] = line_no

    if n < 2:  # noqa: PLR2004
        raise PermutationParseError(1, f"a jigsaw needs at least 2 tiles, got {n}")
    return PermutationSet(n=n, permutations=tuple(seen), seed=seed)


def load(path: Path) -> PermutationSet:
    """Read a permutation-set file."""
    return parse(path.read_text(encoding="utf-8"))
