"""Exception hierarchy for geos."""

from __future__ import annotations

DIVERGENCE_EXIT_CODE = 3
USAGE_EXIT_CODE = 2


class GeosError(Exception):
    """Base class for every error raised by the library."""


class PermutationError(GeosError):
    """A permutation or permutation set is invalid."""


class InfeasibleSetError(PermutationError):
    """More permutations were requested than exist."""

    def __init__(self, count: int, tiles: int, available: int) -> None:
        super().__init__(f"infeasible: {count} > {tiles}! = {available}")
        self.count = count
        self.tiles = tiles
        self.available = available


class InvalidGridError(PermutationError):
    """The tile grid cannot host a jigsaw."""


class InvalidPairError(PermutationError):
    """Two permutations of different sizes were compared."""


class PermutationParseError(PermutationError):
    """A permutation-set file is malformed."""

    def __init__(self, line: int, reason: str) -> None:
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class UnknownPermutationError(PermutationError):
    """A permutation is not a member of the active set."""


class GeometryError(GeosError):
    """An image does not fit the requested tiling or rotation."""


class EmptySourceError(GeosError):
    """A batch was requested from no samples."""


class ShapeError(GeosError):
    """A tensor does not have the shape the network was built for."""


class ConfigError(GeosError):
    """A configuration is invalid or inconsistent."""


class CheckpointError(GeosError):
    """A checkpoint or pretrained weight file does not match the model."""


class SnapshotError(GeosError):
    """A snapshot was restored into a model of a different architecture."""


class IsolationError(GeosError):
    """A gradient crossed the isolation boundary."""


class DivergenceError(GeosError):
    """A loss became non-finite."""

    def __init__(self, batch_id: str, loss_name: str, value: float) -> None:
        super().__init__(f"non-finite {loss_name}={value} at batch {batch_id}")
        self.batch_id = batch_id
        self.loss_name = loss_name
        self.value = value


class AdaptationDivergenceError(DivergenceError):
    """The auxiliary loss became non-finite during one-sample adaptation."""


class ProtocolError(GeosError):
    """Inputs do not match the requested training or evaluation protocol."""


class EmptyEvaluationError(GeosError):
    """Accuracy was requested over an empty set."""


class IngestionError(GeosError):
    """A dataset could not be ingested."""


class EmptyResultError(GeosError):
    """A report was requested for a result without rows."""


class UsageError(GeosError):
    """A command was invoked with an unsupported combination of options."""


def exit_code_for(error: GeosError) -> int:
    """Map an error to the process exit status."""
    if isinstance(error, DivergenceError):
        return DIVERGENCE_EXIT_CODE
    return USAGE_EXIT_CODE
