"""Domain-organized image datasets: folder ingestion, synthesis and splits."""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw, UnidentifiedImageError
from torch import Tensor

from lib.errors import ConfigError, IngestionError
from lib.models import DomainStyle, SynthSpec
from lib.seeding import derive_seed
from lib.sstasks import Sample, as_float_image

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = frozenset({".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"})
SHAPES = ("circle", "square", "triangle", "cross", "ring", "star", "bar")
MANIFEST_COLUMNS = ("path", "domain", "class")

_STAR_POINTS = 5
_COLOR_JITTER = 15


@dataclass(frozen=True)
class ImageRecord:
    """One labeled image of one domain."""

    ref: str
    domain: str
    label: int


@dataclass(frozen=True)
class LabeledSet:
    """Stacked uint8 images with labels; the unit the trainer consumes."""

    refs: tuple[str, ...]
    domains: tuple[str, ...]
    images: Tensor
    labels: Tensor

    def __len__(self) -> int:
        return len(self.refs)

    def batch(self, indices: Sequence[int] | Tensor) -> tuple[Tensor, Tensor]:
        """Float images in [0, 1] and labels for ``indices``."""
        index = torch.as_tensor(indices, dtype=torch.long)
        return as_float_image(self.images[index]), self.labels[index]

    def samples(self) -> list[Sample]:
        """(ref, image) pairs for self-supervised batches."""
        return list(zip(self.refs, self.images, strict=True))


@dataclass(frozen=True)
class UnlabeledPool:
    """Images without labels; auxiliary and target data cross protocol borders this way."""

    refs: tuple[str, ...]
    domains: tuple[str, ...]
    images: Tensor

    def __len__(self) -> int:
        return len(self.refs)

    def samples(self) -> list[Sample]:
        """(ref, image) pairs for self-supervised batches."""
        return list(zip(self.refs, self.images, strict=True))


@dataclass
class DomainDataset:
    """Labeled images grouped by domain; domain names are protocol metadata only."""

    class_names: list[str]
    domains: dict[str, list[ImageRecord]]
    resolution: int
    pixels: dict[str, Tensor]
    errors: list[str] = field(default_factory=list)

    @property
    def domain_names(self) -> list[str]:
        return list(self.domains)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return sum(len(records) for records in self.domains.values())

    def records(self, domains: Iterable[str] | None = None) -> list[ImageRecord]:
        names = self.domain_names if domains is None else list(domains)
        return [record for name in names for record in self.domains[name]]

    def refs(self, domains: Iterable[str] | None = None) -> set[str]:
        return {record.ref for record in self.records(domains)}

    def subset(self, domains: Iterable[str]) -> DomainDataset:
        """Dataset restricted to ``domains``, sharing pixel storage."""
        names = list(domains)
        unknown = [name for name in names if name not in self.domains]
        if unknown:
            msg = f"unknown domain(s): {', '.join(unknown)}"
            raise IngestionError(msg)
        return DomainDataset(
            class_names=self.class_names,
            domains={name: list(self.domains[name]) for name in names},
            resolution=self.resolution,
            pixels=self.pixels,
        )

    def with_records(self, records: Iterable[ImageRecord]) -> DomainDataset:
        """Dataset holding exactly ``records``, grouped by their domains."""
        grouped: dict[str, list[ImageRecord]] = {name: [] for name in self.domains}
        for record in records:
            grouped[record.domain].append(record)
        return DomainDataset(
            class_names=self.class_names,
            domains={name: recs for name, recs in grouped.items() if recs},
            resolution=self.resolution,
            pixels=self.pixels,
        )

    def _stack(self, records: list[ImageRecord]) -> Tensor:
        if not records:
            return torch.empty(0, 3, self.resolution, self.resolution, dtype=torch.uint8)
        return torch.stack([self.pixels[record.ref] for record in records])

    def labeled(self, domains: Iterable[str] | None = None) -> LabeledSet:
        records = self.records(domains)
        return LabeledSet(
            refs=tuple(r.ref for r in records),
            domains=tuple(r.domain for r in records),
            images=self._stack(records),
            labels=torch.tensor([r.label for r in records], dtype=torch.long),
        )

    def unlabeled(self, domains: Iterable[str] | None = None) -> UnlabeledPool:
        records = self.records(domains)
        return UnlabeledPool(
            refs=tuple(r.ref for r in records),
            domains=tuple(r.domain for r in records),
            images=self._stack(records),
        )


def _read_image(path: Path, resolution: int) -> Tensor:
    with Image.open(path) as image:
        resized = image.convert("RGB").resize((resolution, resolution), Image.Resampling.BILINEAR)
        array = np.asarray(resized, dtype=np.uint8).copy()
    return torch.from_numpy(array).permute(2, 0, 1).contiguous()


def _ingest(
    entries: Iterable[tuple[Path, str, str, str]], class_names: list[str], resolution: int
) -> DomainDataset:
    """Decode (path, ref, domain, class) entries; unreadable files go to the error list."""
    label_of = {name: label for label, name in enumerate(class_names)}
    domains: dict[str, list[ImageRecord]] = defaultdict(list)
    pixels: dict[str, Tensor] = {}
    errors: list[str] = []
    for path, ref, domain, class_name in entries:
        try:
            pixels[ref] = _read_image(path, resolution)
        except (OSError, UnidentifiedImageError, ValueError) as e:
            errors.append(f"{ref}: {e}")
            logger.warning("Skipping unreadable image %s: %s", ref, e)
            continue
        domains[domain].append(ImageRecord(ref=ref, domain=domain, label=label_of[class_name]))

    if not pixels:
        msg = "no readable images found"
        raise IngestionError(msg)
    return DomainDataset(
        class_names=class_names,
        domains=dict(sorted(domains.items())),
        resolution=resolution,
        pixels=pixels,
        errors=errors,
    )


def load_folder(root: Path, resolution: int) -> DomainDataset:
    """Ingest ``root/<domain>/<class>/<image>``; labels follow sorted class names.

    Raises:
        IngestionError: if the root is missing, empty or holds no readable image
    """
    if not root.is_dir():
        msg = f"dataset root {root} is not a directory"
        raise IngestionError(msg)
    domain_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not domain_dirs:
        msg = f"dataset root {root} has no domain folders"
        raise IngestionError(msg)
    class_names = sorted({c.name for d in domain_dirs for c in d.iterdir() if c.is_dir()})

    entries = []
    for domain_dir in domain_dirs:
        for class_name in class_names:
            class_dir = domain_dir / class_name
            if not class_dir.is_dir():
                continue
            files = sorted(
                f for f in class_dir.iterdir() if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES
            )
            if not files:
                logger.warning("Empty class folder %s/%s", domain_dir.name, class_name)
            entries.extend(
                (f, f"{domain_dir.name}/{class_name}/{f.name}", domain_dir.name, class_name)
                for f in files
            )
    return _ingest(entries, class_names, resolution)


def load_manifest(manifest: Path, root: Path, resolution: int) -> DomainDataset:
    """Ingest the images listed in a CSV with columns path, domain, class.

    Paths are relative to ``root``; the manifest is how subsets of large
    collections are selected.
    """
    with manifest.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or not set(MANIFEST_COLUMNS) <= set(reader.fieldnames):
            msg = f"manifest {manifest} needs columns {', '.join(MANIFEST_COLUMNS)}"
            raise IngestionError(msg)
        rows = sorted((row["path"], row["domain"], row["class"]) for row in reader)
    class_names = sorted({class_name for _, _, class_name in rows})
    entries = [(root / path, path, domain, class_name) for path, domain, class_name in rows]
    return _ingest(entries, class_names, resolution)


def split(
    dataset: DomainDataset, val_fraction: float, seed: int
) -> tuple[DomainDataset, DomainDataset]:
    """Stratified train/validation split by (domain, class).

    Groups with fewer than two samples go entirely to train.
    """
    if not 0.0 < val_fraction < 1.0:
        msg = f"val_fraction must be in (0, 1), got {val_fraction}"
        raise ConfigError(msg)

    groups: dict[tuple[str, int], list[ImageRecord]] = defaultdict(list)
    for record in dataset.records():
        groups[(record.domain, record.label)].append(record)

    rng = np.random.default_rng(seed)
    train: list[ImageRecord] = []
    val: list[ImageRecord] = []
    for key in sorted(groups):
        members = groups[key]
        if len(members) < 2:  # noqa: PLR2004
            logger.warning("Class %s of domain %s has <2 samples; kept in train", key[1], key[0])
            train.extend(members)
            continue
        order = rng.permutation(len(members))
        n_val = min(len(members) - 1, math.floor(len(members) * val_fraction + 0.5))
        val.extend(members[i] for i in order[:n_val])
        train.extend(members[i] for i in order[n_val:])

    train.sort(key=lambda r: r.ref)
    val.sort(key=lambda r: r.ref)
    return dataset.with_records(train), dataset.with_records(val)


def _read_list(path: Path) -> list[str]:
    return [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def apply_split_lists(
    dataset: DomainDataset, train_list: Path, val_list: Path, strict: bool = True
) -> tuple[DomainDataset, DomainDataset]:
    """Split by user-supplied files of image references, one per line.

    With ``strict`` off, listed images outside ``dataset`` are skipped, so lists
    covering every domain also serve a subset of domains.
    """
    by_ref = {record.ref: record for record in dataset.records()}
    parts = []
    for path in (train_list, val_list):
        refs = _read_list(path)
        unknown = [ref for ref in refs if ref not in by_ref]
        if unknown and strict:
            msg = f"{path} lists {len(unknown)} unknown image(s), e.g. {unknown[0]}"
            raise IngestionError(msg)
        parts.append(dataset.with_records(by_ref[ref] for ref in refs if ref in by_ref))
    return parts[0], parts[1]


def export_folder(dataset: DomainDataset, root: Path) -> int:
    """Write every image as PNG in the folder layout; returns the count written."""
    written = 0
    for record in dataset.records():
        class_name = dataset.class_names[record.label]
        target = root / record.domain / class_name / Path(record.ref).name
        target.parent.mkdir(parents=True, exist_ok=True)
        array = dataset.pixels[record.ref].permute(1, 2, 0).contiguous().numpy()
        Image.fromarray(array).save(target.with_suffix(".png"))
        written += 1
    return written


_BASE_STYLES = (
    DomainStyle(background=(200, 190, 170), foreground=(70, 45, 30)),
    DomainStyle(background=(40, 60, 120), foreground=(250, 200, 60), texture_frequency=3.0),
    DomainStyle(background=(250, 250, 245), foreground=(220, 30, 30), stroke_width=4),
    DomainStyle(background=(255, 255, 255), foreground=(10, 10, 10), stroke_width=1),
)


def default_styles(num_domains: int, seed: int) -> list[DomainStyle]:
    """Four hand-picked looks, then random ones."""
    rng = np.random.default_rng(derive_seed(seed, "styles"))
    styles = list(_BASE_STYLES[:num_domains])
    while len(styles) < num_domains:
        background = tuple(int(v) for v in rng.integers(0, 256, 3))
        foreground = tuple(int(255 - v) for v in background)
        styles.append(
            DomainStyle(
                background=background,  # type: ignore[arg-type]
                foreground=foreground,  # type: ignore[arg-type]
                texture_frequency=float(rng.uniform(0.0, 6.0)),
                stroke_width=int(rng.choice([0, 1, 3, 5])),
            )
        )
    return styles


def _background(style: DomainStyle, resolution: int, rng: np.random.Generator) -> np.ndarray:
    canvas = np.empty((resolution, resolution, 3), dtype=np.float64)
    canvas[:] = style.background
    if style.texture_frequency > 0:
        angle, phase = rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi)
        ys, xs = np.mgrid[0:resolution, 0:resolution] / resolution
        direction = xs * np.cos(angle) + ys * np.sin(angle)
        wave = np.sin(2 * np.pi * style.texture_frequency * direction + phase)
        canvas += 40.0 * wave[..., None]
    return np.clip(canvas, 0, 255).astype(np.uint8)


def _outline(points: list[tuple[float, float]]) -> list[tuple[float, float]]:
    return [*points, points[0]]


def _shape_points(shape: str, cx: float, cy: float, r: float) -> list[tuple[float, float]]:
    if shape == "triangle":
        return [(cx, cy - r), (cx + r * 0.87, cy + r * 0.5), (cx - r * 0.87, cy + r * 0.5)]
    if shape == "star":
        points = []
        for k in range(2 * _STAR_POINTS):
            radius = r if k % 2 == 0 else r * 0.45
            theta = -np.pi / 2 + k * np.pi / _STAR_POINTS
            points.append((cx + radius * np.cos(theta), cy + radius * np.sin(theta)))
        return points
    if shape == "cross":
        t = r * 0.33
        return [
            (cx - t, cy - r), (cx + t, cy - r), (cx + t, cy - t), (cx + r, cy - t),
            (cx + r, cy + t), (cx + t, cy + t), (cx + t, cy + r), (cx - t, cy + r),
            (cx - t, cy + t), (cx - r, cy + t), (cx - r, cy - t), (cx - t, cy - t),
        ]  # fmt: skip
    if shape == "bar":
        return [(cx - r, cy - r * 0.25), (cx + r, cy - r * 0.25), (cx + r, cy + r * 0.25),
                (cx - r, cy + r * 0.25)]  # fmt: skip
    # square
    return [(cx - r * 0.8, cy - r * 0.8), (cx + r * 0.8, cy - r * 0.8),
            (cx + r * 0.8, cy + r * 0.8), (cx - r * 0.8, cy + r * 0.8)]  # fmt: skip


def _draw_shape(
    draw: ImageDraw.ImageDraw,
    shape: str,
    center: tuple[float, float],
    r: float,
    color: tuple[int, int, int],
    stroke: int,
) -> None:
    cx, cy = center
    box = (cx - r, cy - r, cx + r, cy + r)
    if shape == "circle":
        if stroke:
            draw.ellipse(box, outline=color, width=stroke)
        else:
            draw.ellipse(box, fill=color)
    elif shape == "ring":
        draw.ellipse(box, outline=color, width=max(stroke, max(2, int(r * 0.3))))
        if stroke:
            inner = r * 0.45
            box = (cx - inner, cy - inner, cx + inner, cy + inner)
            draw.ellipse(box, outline=color, width=stroke)
    else:
        points = _shape_points(shape, cx, cy, r)
        if stroke:
            draw.line(_outline(points), fill=color, width=stroke, joint="curve")
        else:
            draw.polygon(points, fill=color)


def _render(style: DomainStyle, shape: str, resolution: int, seed: int) -> Tensor:
    rng = np.random.default_rng(seed)
    image = Image.fromarray(_background(style, resolution, rng))
    r = resolution * rng.uniform(0.22, 0.34)
    center = (
        resolution / 2 + rng.uniform(-0.1, 0.1) * resolution,
        resolution / 2 + rng.uniform(-0.1, 0.1) * resolution,
    )
    color = tuple(
        int(np.clip(v + rng.integers(-_COLOR_JITTER, _COLOR_JITTER + 1), 0, 255))
        for v in style.foreground
    )
    draw = ImageDraw.Draw(image)
    _draw_shape(draw, shape, center, r, color, style.stroke_width)  # type: ignore[arg-type]
    array = np.asarray(image, dtype=np.uint8).copy()
    return torch.from_numpy(array).permute(2, 0, 1).contiguous()


def synthesize(spec: SynthSpec) -> DomainDataset:
    """Render a deterministic multi-domain shapes dataset.

    The class is the shape; the domain decides palette, background texture and
    stroke width.
    """
    styles = spec.shift_knobs or default_styles(spec.num_domains, spec.seed)
    class_names = list(SHAPES[: spec.num_classes])
    domains: dict[str, list[ImageRecord]] = {}
    pixels: dict[str, Tensor] = {}
    for d, style in enumerate(styles):
        name = f"synth{d}"
        records = []
        for label, shape in enumerate(class_names):
            for i in range(spec.samples_per_domain_class):
                ref = f"{name}/{shape}/{i:05d}.png"
                seed = derive_seed(spec.seed, "render", d, label, i)
                pixels[ref] = _render(style, shape, spec.resolution, seed)
                records.append(ImageRecord(ref=ref, domain=name, label=label))
        domains[name] = records
    logger.info("Synthesized %d images over %d domains", len(pixels), len(domains))
    return DomainDataset(
        class_names=class_names, domains=domains, resolution=spec.resolution, pixels=pixels
    )
