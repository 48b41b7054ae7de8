"""Shared encoder with a supervised lesion head and a jigsaw head."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import torch
import torch.nn as nn

from .permset import Permutation, PermutationSet

CHECKPOINT_VERSION = 1


class TinyCNN(nn.Module):
    """Strided conv stack for CPU-scale experiments; global-average-pooled to ``feature_dim``."""

    def __init__(self, in_channels: int = 3, widths=(16, 32, 64)):
        super().__init__()
        layers = []
        c = in_channels
        for w in widths:
            layers += [nn.Conv2d(c, w, 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
            layers += [nn.Conv2d(w, w, 3, padding=1, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
            c = w
        self.body = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.feature_dim = c

    def forward(self, x):
        return self.pool(self.body(x)).flatten(1)


def _resnet18():
    from torchvision.models import resnet18

    net = resnet18(weights=None)
    net.fc = nn.Identity()
    net.feature_dim = 512
    return net


ENCODERS: dict[str, Callable[[], nn.Module]] = {
    "tiny-cnn": TinyCNN,
    "resnet18": _resnet18,
}


def register_encoder(name: str, factory: Callable[[], nn.Module]) -> None:
    """Add an encoder factory; the module must expose ``feature_dim``."""
    ENCODERS[name] = factory


@dataclass(frozen=True)
class EncoderDescriptor:
    name: str = "tiny-cnn"
    init_mode: str = "random"  # "random" or "pretrained-file"
    pretrained_path: str | None = None


class DualHeadModel(nn.Module):
    def __init__(self, encoder: nn.Module, num_jigsaw_classes: int | None, descriptor: EncoderDescriptor,
                 num_classes: int = 2):
        super().__init__()
        self.encoder = encoder
        self.descriptor = descriptor
        f = encoder.feature_dim
        self.supervised_head = nn.Linear(f, num_classes)
        self.jigsaw_head = nn.Linear(f, num_jigsaw_classes) if num_jigsaw_classes else None

    @property
    def feature_dim(self) -> int:
        return self.encoder.feature_dim

    @property
    def has_jigsaw_head(self) -> bool:
        return self.jigsaw_head is not None

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4:
            raise ValueError(f"expected a (B, C, H, W) batch, got shape {tuple(x.shape)}")
        return self.encoder(x)

    def forward_supervised(self, x: torch.Tensor) -> torch.Tensor:
        return self.supervised_head(self.features(x))

    def forward_jigsaw(self, z: torch.Tensor) -> torch.Tensor:
        if self.jigsaw_head is None:
            raise RuntimeError("model has no jigsaw head")
        return self.jigsaw_head(self.features(z))

    forward = forward_supervised

    def encoder_params(self):
        return list(self.encoder.parameters())

    def supervised_params(self):
        return list(self.supervised_head.parameters())

    def jigsaw_params(self):
        return [] if self.jigsaw_head is None else list(self.jigsaw_head.parameters())


def build_model(descriptor: EncoderDescriptor | str = "tiny-cnn", P: int | None = 30,
                seed: int | None = None, init_mode: str | None = None,
                pretrained_path: str | None = None) -> DualHeadModel:
    """Build a dual-head model with a ``P + 1``-way jigsaw head (``P=None`` gives the baseline, no jigsaw head)."""
    if isinstance(descriptor, str):
        descriptor = EncoderDescriptor(descriptor)
    if init_mode is not None or pretrained_path is not None:
        descriptor = EncoderDescriptor(descriptor.name, init_mode or descriptor.init_mode,
                                       pretrained_path or descriptor.pretrained_path)
    if descriptor.name not in ENCODERS:
        raise KeyError(f"unknown encoder {descriptor.name!r}; known: {sorted(ENCODERS)}")
    if seed is not None:
        torch.manual_seed(seed)
    encoder = ENCODERS[descriptor.name]()
    if descriptor.init_mode == "pretrained-file":
        path = descriptor.pretrained_path
        if not path or not Path(path).exists():
            raise FileNotFoundError(f"pretrained encoder weights not found: {path}")
        state = torch.load(path, map_location="cpu", weights_only=True)
        state = {k: v for k, v in state.items() if not k.startswith("fc.")}
        try:
            encoder.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise ValueError(f"pretrained weights incompatible with {descriptor.name}: {exc}") from exc
    elif descriptor.init_mode != "random":
        raise ValueError(f"unknown init_mode {descriptor.init_mode!r}")
    return DualHeadModel(encoder, None if P is None else P + 1, descriptor)


def save_checkpoint(model: DualHeadModel, path: str | Path, permset: PermutationSet | None = None,
                    extra: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "descriptor": asdict(model.descriptor),
        "num_jigsaw_classes": model.jigsaw_head.out_features if model.jigsaw_head is not None else None,
        "state_dict": model.state_dict(),
        "permset": None if permset is None else {
            "grid": permset.grid_size, "P": permset.P, "seed": permset.generation_seed,
            "orders": [list(p.order) for p in permset.scrambled],
        },
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[DualHeadModel, PermutationSet | None, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    descriptor = EncoderDescriptor(**payload["descriptor"])
    # weights come from the checkpoint, so skip any pretrained-file lookup
    encoder = ENCODERS[descriptor.name]()
    model = DualHeadModel(encoder, payload["num_jigsaw_classes"], descriptor)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    ps = payload["permset"]
    permset = None
    if ps is not None:
        permset = PermutationSet.from_permutations(ps["grid"], [Permutation(tuple(o)) for o in ps["orders"]], ps["seed"])
    return model, permset, payload["extra"]


def inference_state_dict(model: DualHeadModel) -> dict:
    """Parameters needed for lesion classification only (jigsaw head dropped)."""
    return {k: v for k, v in model.state_dict().items() if not k.startswith("jigsaw_head.")}
