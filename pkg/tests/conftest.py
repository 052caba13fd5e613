"""Shared fixtures: a tiny synthetic dataset, a tiny network and a small permutation set."""

import pytest
import torch

from lib.datasets import DomainDataset, synthesize
from lib.models import ModelConfig, SynthSpec, TrainConfig
from lib.netcore import GeosModel, build
from lib.permset import PermutationSet, generate

TINY_RESOLUTION = 24
TINY_CHANNELS = (4, 4, 8, 8)


@pytest.fixture(scope="session")
def tiny_spec() -> SynthSpec:
    """Three domains of three shapes, six images each."""
    return SynthSpec(
        num_domains=3,
        num_classes=3,
        samples_per_domain_class=6,
        resolution=TINY_RESOLUTION,
        seed=7,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tiny_spec: SynthSpec) -> DomainDataset:
    """Rendered once per session; tests must not mutate it."""
    return synthesize(tiny_spec)


@pytest.fixture(scope="session")
def perm_set() -> PermutationSet:
    """Five permutations of a 3x3 grid."""
    return generate(9, 5, 0)


@pytest.fixture
def tiny_config() -> TrainConfig:
    """One quick epoch of the desk network at 24px."""
    return TrainConfig(
        mode="dg",
        backbone="desk_cnn",
        resolution=TINY_RESOLUTION,
        epochs=1,
        batch_size_primary=8,
        batch_size_auxiliary=8,
        desk_channels=TINY_CHANNELS,
        num_permutations=5,
        lr_main=0.01,
        lr_head=0.01,
        eval_batch_size=32,
    )


@pytest.fixture
def tiny_model() -> GeosModel:
    """Freshly initialized desk network for three classes and five permutations."""
    return build(
        ModelConfig(
            backbone="desk_cnn",
            num_classes=3,
            num_pretext=5,
            input_size=TINY_RESOLUTION,
            desk_channels=TINY_CHANNELS,
        )
    )


@pytest.fixture
def noise_image() -> torch.Tensor:
    """Random 24px image; its tiles are pairwise distinct."""
    generator = torch.Generator().manual_seed(1234)
    return torch.rand(3, TINY_RESOLUTION, TINY_RESOLUTION, generator=generator)
