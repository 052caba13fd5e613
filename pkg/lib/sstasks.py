"""Self-supervised data-label pairs: jigsaw scrambling and 90-degree rotation."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import torch
import torchvision.transforms.functional as TF  # noqa: N812
from torch import Tensor

from lib.errors import ConfigError, EmptySourceError, GeometryError
from lib.models import ROTATION_CLASSES, AugmentConfig, Task
from lib.permset import PermutationSet

Grid = tuple[int, int]
Sample = tuple[str, Tensor]

_IMAGE_DIMS = 3
_UINT8_MAX = 255.0
_DRAWS_PER_AUGMENT = 7


@dataclass(frozen=True)
class SSVariant:
    """A transformed image and the label of the transformation applied to it."""

    image: Tensor
    label: int
    task: Task
    source_id: str


def as_float_image(image: Tensor) -> Tensor:
    """uint8 rasters become floats in [0, 1]; float rasters pass through."""
    if image.dtype == torch.uint8:
        return image.float() / _UINT8_MAX
    return image


def _check_raster(image: Tensor) -> tuple[int, int, int]:
    if image.dim() != _IMAGE_DIMS:
        msg = f"expected a C×H×W image, got shape {tuple(image.shape)}"
        raise GeometryError(msg)
    c, h, w = image.shape
    return int(c), int(h), int(w)


def num_pretext_classes(task: Task, perm_set: PermutationSet | None) -> int:
    """V for the active task."""
    if task == "rotation":
        return ROTATION_CLASSES
    if perm_set is None:
        msg = "the jigsaw task needs a permutation set"
        raise ConfigError(msg)
    return perm_set.size


def scramble_tiles(image: Tensor, perm: Sequence[int], grid: Grid) -> Tensor:
    """Rearrange tiles so that output position i holds input tile ``perm[i]``.

    Tiles are numbered row-major from the top-left corner.

    Raises:
        GeometryError: if the image does not split into equal tiles
    """
    rows, cols = grid
    c, h, w = _check_raster(image)
    if len(perm) != rows * cols:
        msg = f"permutation of {len(perm)} tiles does not fit a {rows}x{cols} grid"
        raise GeometryError(msg)
    if h % rows or w % cols:
        msg = f"{h}x{w} image does not split into a {rows}x{cols} grid"
        raise GeometryError(msg)

    th, tw = h // rows, w // cols
    tiles = image.reshape(c, rows, th, cols, tw).permute(1, 3, 0, 2, 4).reshape(-1, c, th, tw)
    moved = tiles[torch.as_tensor(list(perm), dtype=torch.long)]
    return moved.reshape(rows, cols, c, th, tw).permute(2, 0, 3, 1, 4).reshape(c, h, w)


def scramble(
    image: Tensor,
    perm: Sequence[int],
    perm_set: PermutationSet,
    grid: Grid | None = None,
    source_id: str = "",
) -> SSVariant:
    """Scramble an image with a member of the active permutation set.

    Raises:
        GeometryError: on indivisible dimensions or a grid that does not match the set
        UnknownPermutationError: if ``perm`` is not in ``perm_set``
    """
    grid = grid or (perm_set.grid_side, perm_set.grid_side)
    if grid[0] * grid[1] != perm_set.n:
        msg = f"a {grid[0]}x{grid[1]} grid does not hold {perm_set.n} tiles"
        raise GeometryError(msg)
    label = perm_set.index(perm)
    return SSVariant(
        image=scramble_tiles(image, perm, grid), label=label, task="jigsaw", source_id=source_id
    )


def rotate(image: Tensor, v: int, source_id: str = "") -> SSVariant:
    """Rotate a square image counterclockwise by 90°·v.

    Raises:
        GeometryError: on non-square input or v outside [0, 4)
    """
    _, h, w = _check_raster(image)
    if h != w:
        msg = f"rotation needs a square image, got {h}x{w}"
        raise GeometryError(msg)
    if not 0 <= v < ROTATION_CLASSES:
        msg = f"rotation index must be in [0, {ROTATION_CLASSES}), got {v}"
        raise GeometryError(msg)
    return SSVariant(
        image=torch.rot90(image, k=v, dims=(-2, -1)), label=v, task="rotation", source_id=source_id
    )


def augment(image: Tensor, config: AugmentConfig, generator: torch.Generator) -> Tensor:
    """Random resized crop, horizontal flip and photometric jitter.

    The same number of random draws is consumed whatever the outcome, so streams
    stay aligned across samples.
    """
    _, h, w = _check_raster(image)
    draws = torch.rand(_DRAWS_PER_AUGMENT, generator=generator).tolist()
    size = [config.crop_size, config.crop_size]
    if not config.enabled:
        if (h, w) == (config.crop_size, config.crop_size):
            return image
        return TF.resize(image, size, antialias=True)

    scale = config.crop_scale_min + (1.0 - config.crop_scale_min) * draws[0]
    crop_h = max(1, round(h * scale**0.5))
    crop_w = max(1, round(w * scale**0.5))
    top = int(draws[1] * (h - crop_h + 1))
    left = int(draws[2] * (w - crop_w + 1))
    out = TF.resized_crop(image, top, left, crop_h, crop_w, size, antialias=True)

    if draws[3] < config.flip_probability:
        out = TF.hflip(out)

    strength = config.photometric_strength
    if strength > 0:
        out = TF.adjust_brightness(out, 1.0 + strength * (2 * draws[4] - 1))
        out = TF.adjust_contrast(out, 1.0 + strength * (2 * draws[5] - 1))
        out = TF.adjust_saturation(out, 1.0 + strength * (2 * draws[6] - 1))
    return out.clamp(0.0, 1.0)


def make_variant(
    image: Tensor,
    task: Task,
    label: int,
    perm_set: PermutationSet | None,
    source_id: str = "",
) -> SSVariant:
    """Apply the transformation that ``label`` names for ``task``."""
    if task == "rotation":
        return rotate(image, label, source_id)
    if perm_set is None:
        msg = "the jigsaw task needs a permutation set"
        raise ConfigError(msg)
    side = perm_set.grid_side
    return SSVariant(
        image=scramble_tiles(image, perm_set.permutations[label], (side, side)),
        label=label,
        task="jigsaw",
        source_id=source_id,
    )


def make_ss_batch(
    samples: Sequence[Sample],
    task: Task,
    perm_set: PermutationSet | None,
    batch_size: int,
    seed: int,
    augment_config: AugmentConfig | None = None,
) -> list[SSVariant]:
    """Draw ``batch_size`` variants; each picks a sample and a uniform random label.

    Augmentation, when enabled, is applied to the whole image before scrambling.

    Raises:
        EmptySourceError: if ``samples`` is empty
        ConfigError: if the jigsaw task has no permutation set
    """
    if not samples:
        msg = "cannot build a self-supervised batch from no samples"
        raise EmptySourceError(msg)
    num_labels = num_pretext_classes(task, perm_set)
    if augment_config is not None and task == "jigsaw" and perm_set is not None:
        augment_config.check_grid(perm_set.grid_side)

    generator = torch.Generator().manual_seed(seed)
    picks = torch.randint(len(samples), (batch_size,), generator=generator).tolist()
    labels = torch.randint(num_labels, (batch_size,), generator=generator).tolist()

    variants = []
    for pick, label in zip(picks, labels, strict=True):
        source_id, raw = samples[pick]
        image = as_float_image(raw)
        if augment_config is not None:
            image = augment(image, augment_config, generator)
        variants.append(make_variant(image, task, label, perm_set, source_id))
    return variants


def collate(variants: Sequence[SSVariant]) -> tuple[Tensor, Tensor]:
    """Stack variants into an image batch and a label vector."""
    images = torch.stack([variant.image for variant in variants])
    labels = torch.tensor([variant.label for variant in variants], dtype=torch.long)
    return images, labels


def infer_label(
    original: Tensor, variant: Tensor, task: Task, perm_set: PermutationSet | None
) -> int | None:
    """Find the label whose transformation maps ``original`` onto ``variant``."""
    for label in range(num_pretext_classes(task, perm_set)):
        candidate = make_variant(original, task, label, perm_set).image
        if candidate.shape == variant.shape and torch.equal(candidate, variant):
            return label
    return None
