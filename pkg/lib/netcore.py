"""GeS network: backbone Θ, auxiliary residual block Λ and gradient isolation."""

from __future__ import annotations

import hashlib
import logging
import pickle
from collections import OrderedDict
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, NamedTuple

import torch
import torchvision
from torch import Tensor, nn

from lib.errors import CheckpointError, ConfigError, ShapeError, SnapshotError
from lib.models import ModelConfig
from lib.seeding import generator_for

logger = logging.getLogger(__name__)

Branch = Literal["primary", "auxiliary"]

THETA_PREFIX = "theta/"
LAMBDA_PREFIX = "lambda/"
GROUP_NAMES = ("theta_body", "theta_head", "lambda_body", "lambda_head")

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)
_BATCH_DIMS = 4


@dataclass(frozen=True)
class BackboneProfile:
    """Per-backbone defaults."""

    aux_norm: bool
    imagenet_norm: bool


PROFILES: dict[str, BackboneProfile] = {
    "desk_cnn": BackboneProfile(aux_norm=False, imagenet_norm=False),
    "resnet18": BackboneProfile(aux_norm=True, imagenet_norm=True),
}


class ForwardOutput(NamedTuple):
    """Logits and intermediate feature maps of one forward pass."""

    primary_logits: Tensor | None
    pretext_logits: Tensor | None
    features_theta: Tensor
    features_lambda: Tensor


class InputNorm(nn.Module):
    """Fixed per-channel normalization applied before the backbone."""

    mean: Tensor
    std: Tensor

    def __init__(self, mean: tuple[float, ...], std: tuple[float, ...]) -> None:
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))

    def forward(self, x: Tensor) -> Tensor:
        return (x - self.mean) / self.std


class ThetaNet(nn.Module):
    """Primary network: feature extractor plus class head."""

    def __init__(self, norm: InputNorm, features: nn.Sequential, channels: int, classes: int):
        super().__init__()
        self.norm = norm
        self.features = features
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(channels, classes)

    def extract(self, x: Tensor) -> Tensor:
        """Final convolutional feature map, before pooling."""
        return self.features(self.norm(x))

    def classify(self, features: Tensor) -> Tensor:
        """Global average pooling and the primary head."""
        return self.head(torch.flatten(self.pool(features), 1))


class AuxiliaryBlock(nn.Module):
    """Residual block; its branch is the refinement map, its output feeds the pretext head."""

    def __init__(self, channels: int, num_pretext: int, norm: bool) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=not norm)
        self.bn1: nn.Module = nn.BatchNorm2d(channels) if norm else nn.Identity()
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=not norm)
        self.bn2: nn.Module = nn.BatchNorm2d(channels) if norm else nn.Identity()
        self.relu = nn.ReLU()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(channels, num_pretext)

    def refinement(self, features: Tensor) -> Tensor:
        """Residual branch, summed into the primary features."""
        out = self.relu(self.bn1(self.conv1(features)))
        return self.bn2(self.conv2(out))

    def trunk(self, features: Tensor) -> Tensor:
        return self.relu(self.refinement(features) + features)

    def last_layer(self) -> nn.Conv2d | nn.BatchNorm2d:
        """Final layer of the residual branch."""
        return self.bn2 if isinstance(self.bn2, nn.BatchNorm2d) else self.conv2

    def pretext(self, trunk: Tensor) -> Tensor:
        return self.head(torch.flatten(self.pool(trunk), 1))


@contextmanager
def _evaluating(module: nn.Module) -> Iterator[None]:
    was_training = module.training
    module.eval()
    try:
        yield
    finally:
        module.train(was_training)


class GeosNet(nn.Module):
    """Interface the trainer and the adaptation loop drive.

    Subclasses own two disjoint parameter groups: ``theta`` (primary network) and
    ``aux`` (auxiliary block).
    """

    theta: nn.Module
    aux: nn.Module
    isolation: bool

    def check_input(self, x: Tensor) -> None:
        """Raise ShapeError when ``x`` does not fit the network."""

    def forward_primary(self, x: Tensor) -> ForwardOutput:
        raise NotImplementedError

    def forward_auxiliary(self, x: Tensor) -> ForwardOutput:
        raise NotImplementedError

    def forward(self, x: Tensor, branch: Branch = "primary") -> ForwardOutput:
        if branch == "auxiliary":
            return self.forward_auxiliary(x)
        return self.forward_primary(x)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Parameters by group; heads are split from bodies when a subclass has them."""
        return {
            "theta_body": list(self.theta.parameters()),
            "lambda_body": list(self.aux.parameters()),
        }


class GeosModel(GeosNet):
    """Backbone Θ with auxiliary block Λ summed into the primary features."""

    theta: ThetaNet
    aux: AuxiliaryBlock

    def __init__(
        self,
        config: ModelConfig,
        theta: ThetaNet,
        aux: AuxiliaryBlock,
        feature_shape: tuple[int, int, int],
    ) -> None:
        super().__init__()
        self.config = config
        self.theta = theta
        self.aux = aux
        self.isolation = config.isolation
        self.feature_shape = feature_shape

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def num_pretext(self) -> int:
        return self.config.num_pretext

    def check_input(self, x: Tensor) -> None:
        expected = (self.config.in_channels, self.config.input_size, self.config.input_size)
        if x.dim() != _BATCH_DIMS or tuple(x.shape[1:]) != expected:
            msg = f"expected a batch of {expected} images, got {tuple(x.shape)}"
            raise ShapeError(msg)

    def forward_primary(self, x: Tensor) -> ForwardOutput:
        features = self.theta.extract(x)
        if self.isolation:
            # output end: the primary loss never reaches Λ, and primary batches leave
            # its batch-norm statistics alone
            with torch.no_grad(), _evaluating(self.aux):
                refined = self.aux.refinement(features)
        else:
            refined = self.aux.refinement(features)
        logits = self.theta.classify(features + refined)
        return ForwardOutput(logits, None, features, refined)

    def forward_auxiliary(self, x: Tensor) -> ForwardOutput:
        features = self.theta.extract(x)
        # input end: the auxiliary loss never reaches Θ
        trunk = self.aux.trunk(features.detach() if self.isolation else features)
        return ForwardOutput(None, self.aux.pretext(trunk), features, trunk)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "theta_body": [*self.theta.features.parameters()],
            "theta_head": [*self.theta.head.parameters()],
            "lambda_body": [
                p for name, p in self.aux.named_parameters() if not name.startswith("head.")
            ],
            "lambda_head": [*self.aux.head.parameters()],
        }


def forward_primary(model: GeosNet, x: Tensor) -> ForwardOutput:
    """Class logits from Θ(x) + Λ(Θ(x)).

    Raises:
        ShapeError: if ``x`` does not match the configured input
    """
    model.check_input(x)
    return model.forward_primary(x)


def forward_auxiliary(model: GeosNet, x: Tensor) -> ForwardOutput:
    """Pretext logits from Λ(Θ(x̃)).

    Raises:
        ShapeError: if ``x`` does not match the configured input
    """
    model.check_input(x)
    return model.forward_auxiliary(x)


def _desk_features(in_channels: int, channels: tuple[int, ...]) -> nn.Sequential:
    layers: OrderedDict[str, nn.Module] = OrderedDict()
    previous = in_channels
    last = len(channels) - 1
    for i, width in enumerate(channels):
        stride = 1 if i == last else 2
        layers[f"conv{i}"] = nn.Conv2d(previous, width, 3, stride=stride, padding=1)
        layers[f"relu{i}"] = nn.ReLU()
        previous = width
    return nn.Sequential(layers)


def _resnet18_features(in_channels: int) -> nn.Sequential:
    net = torchvision.models.resnet18(weights=None)
    if in_channels != net.conv1.in_channels:
        net.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
    return nn.Sequential(
        OrderedDict(
            conv1=net.conv1,
            bn1=net.bn1,
            relu=net.relu,
            maxpool=net.maxpool,
            layer1=net.layer1,
            layer2=net.layer2,
            layer3=net.layer3,
            layer4=net.layer4,
        )
    )


def _input_norm(config: ModelConfig, profile: BackboneProfile) -> InputNorm:
    if profile.imagenet_norm and config.in_channels == len(_IMAGENET_MEAN):
        return InputNorm(_IMAGENET_MEAN, _IMAGENET_STD)
    return InputNorm((0.5,) * config.in_channels, (0.5,) * config.in_channels)


ConvInit = Literal["uniform", "kaiming"]


def _seeded_init(module: nn.Module, generator: torch.Generator, conv: ConvInit = "uniform") -> None:
    """Draw every weight of ``module`` from ``generator`` alone.

    Linear layers, and conv layers under ``"uniform"``, get U(±1/sqrt(fan_in)).
    ``"kaiming"`` convs get N(0, 2/fan_out) without bias, as torchvision's ResNets
    do. Batch norm starts at the identity.
    """
    with torch.no_grad():
        for layer in module.modules():
            if isinstance(layer, nn.Conv2d) and conv == "kaiming":
                fan_out = layer.weight.shape[0] * layer.weight[0, 0].numel()
                layer.weight.normal_(0.0, (2.0 / fan_out) ** 0.5, generator=generator)
                if layer.bias is not None:
                    layer.bias.zero_()
            elif isinstance(layer, nn.Conv2d | nn.Linear):
                bound = layer.weight[0].numel() ** -0.5
                layer.weight.uniform_(-bound, bound, generator=generator)
                if layer.bias is not None:
                    layer.bias.uniform_(-bound, bound, generator=generator)
            elif isinstance(layer, nn.BatchNorm2d):
                layer.reset_parameters()


def _feature_shape(
    norm: InputNorm, features: nn.Sequential, config: ModelConfig
) -> tuple[int, int, int]:
    blank = torch.zeros(1, config.in_channels, config.input_size, config.input_size)
    features.eval()
    with torch.no_grad():
        c, h, w = features(norm(blank)).shape[1:]
    features.train()
    return int(c), int(h), int(w)


def build(config: ModelConfig) -> GeosModel:
    """Instantiate a GeS network.

    Θ starts from ``config.pretrained`` when given, otherwise from the seed. Λ gets
    seeded uniform weights; the last layer of its residual branch starts at zero
    when ``zero_init_refine`` is set, so the network starts at the backbone baseline
    while the auxiliary loss still reaches that layer through the pretext head.

    Weights come from private generators named after the seed, so networks built
    concurrently in several threads equal their serial twins.

    Raises:
        ConfigError: on an unknown backbone profile
        CheckpointError: if pretrained weights do not fit the backbone
    """
    profile = PROFILES.get(config.backbone)
    if profile is None:
        msg = f"unknown backbone {config.backbone!r}; choose from {', '.join(PROFILES)}"
        raise ConfigError(msg)

    # layer constructors draw default weights from the global stream; keep the caller's
    with torch.random.fork_rng(devices=[]):
        if config.backbone == "resnet18":
            features = _resnet18_features(config.in_channels)
        else:
            features = _desk_features(config.in_channels, config.desk_channels)
        norm_layer = _input_norm(config, profile)
        feature_shape = _feature_shape(norm_layer, features, config)
        theta = ThetaNet(norm_layer, features, feature_shape[0], config.num_classes)
        norm = profile.aux_norm if config.aux_norm is None else config.aux_norm
        aux = AuxiliaryBlock(feature_shape[0], config.num_pretext, norm)

    conv: ConvInit = "kaiming" if config.backbone == "resnet18" else "uniform"
    _seeded_init(theta.features, generator_for(config.seed, "init", "theta"), conv)
    _seeded_init(theta.head, generator_for(config.seed, "init", "theta-head"))
    _seeded_init(aux, generator_for(config.seed, "init", "lambda"))
    if config.zero_init_refine:
        last = aux.last_layer()
        nn.init.zeros_(last.weight)
        if last.bias is not None:
            nn.init.zeros_(last.bias)

    model = GeosModel(config, theta, aux, feature_shape)
    if config.pretrained is not None:
        load_pretrained(model, config.pretrained)
    logger.debug("Built %s with feature map %s", config.backbone, feature_shape)
    return model


def _read_tensor_file(path: Path) -> dict[str, Tensor]:
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, pickle.UnpicklingError) as e:
        msg = f"cannot read weights from {path}: {e}"
        raise CheckpointError(msg) from e
    if isinstance(state, dict) and isinstance(state.get("state_dict"), dict):
        state = state["state_dict"]
    if not isinstance(state, dict):
        msg = f"{path} does not hold a state dict"
        raise CheckpointError(msg)
    return state


def load_pretrained(model: GeosModel, path: Path) -> None:
    """Load backbone weights; keys of the source classifier are ignored.

    Raises:
        CheckpointError: on missing keys or shape mismatches
    """
    state = _read_tensor_file(path)
    expected = model.theta.features.state_dict()
    missing = [key for key in expected if key not in state]
    if missing:
        msg = f"pretrained file lacks {len(missing)} backbone tensors, e.g. {missing[0]}"
        raise CheckpointError(msg)
    for key, tensor in expected.items():
        if tuple(state[key].shape) != tuple(tensor.shape):
            msg = f"{key}: file has {tuple(state[key].shape)}, model has {tuple(tensor.shape)}"
            raise CheckpointError(msg)
    model.theta.features.load_state_dict({key: state[key] for key in expected})
    logger.info("Loaded pretrained backbone from %s", path)


def parameter_report(model: GeosNet) -> dict[str, int]:
    """Parameter counts per group.

    Raises:
        ConfigError: if a parameter belongs to more than one group
    """
    groups = model.parameter_groups()
    seen: set[int] = set()
    report = {}
    for name, params in groups.items():
        ids = {id(p) for p in params}
        if ids & seen:
            msg = f"group {name} shares parameters with another group"
            raise ConfigError(msg)
        seen |= ids
        report[name] = sum(p.numel() for p in params)
    return report


@dataclass(frozen=True)
class LambdaSnapshot:
    """Copy of every Λ tensor, buffers included."""

    state: dict[str, Tensor]

    @property
    def signature(self) -> dict[str, tuple[int, ...]]:
        return {name: tuple(t.shape) for name, t in self.state.items()}


def snapshot_lambda(model: GeosNet) -> LambdaSnapshot:
    """Copy Λ so it can be restored bit for bit."""
    return LambdaSnapshot({k: v.detach().clone() for k, v in model.aux.state_dict().items()})


def restore_lambda(model: GeosNet, snapshot: LambdaSnapshot) -> None:
    """Make Λ bitwise equal to ``snapshot``; Θ is untouched.

    Raises:
        SnapshotError: if the snapshot was taken from another architecture
    """
    current = {name: tuple(t.shape) for name, t in model.aux.state_dict().items()}
    if current != snapshot.signature:
        msg = "snapshot does not match the auxiliary block of this model"
        raise SnapshotError(msg)
    model.aux.load_state_dict(snapshot.state)


def module_digest(module: nn.Module) -> str:
    """SHA-256 over every tensor of a module, in name order."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def prefixed_state(model: GeosNet) -> dict[str, Tensor]:
    """Named tensors under ``theta/`` and ``lambda/`` prefixes."""
    tensors: dict[str, Tensor] = {}
    for prefix, module in ((THETA_PREFIX, model.theta), (LAMBDA_PREFIX, model.aux)):
        tensors.update({f"{prefix}{k}": v.detach().clone() for k, v in module.state_dict().items()})
    return tensors


def load_prefixed_state(model: GeosNet, tensors: dict[str, Tensor]) -> None:
    """Inverse of ``prefixed_state``.

    Raises:
        CheckpointError: if names or shapes differ from the model
    """
    parts: dict[str, tuple[nn.Module, dict[str, Tensor]]] = {
        THETA_PREFIX: (model.theta, {}),
        LAMBDA_PREFIX: (model.aux, {}),
    }
    for key, tensor in tensors.items():
        prefix = next((p for p in parts if key.startswith(p)), None)
        if prefix is None:
            msg = f"unexpected tensor {key}"
            raise CheckpointError(msg)
        parts[prefix][1][key.removeprefix(prefix)] = tensor

    for prefix, (module, state) in parts.items():
        expected = {k: tuple(v.shape) for k, v in module.state_dict().items()}
        found = {k: tuple(v.shape) for k, v in state.items()}
        if expected != found:
            diff = sorted(set(expected.items()) ^ set(found.items()))
            msg = f"{prefix} tensors do not match the model: {diff[:3]}"
            raise CheckpointError(msg)
        module.load_state_dict(state)


def model_device(model: nn.Module) -> torch.device:
    """Device holding the model's parameters."""
    return next(model.parameters()).device
