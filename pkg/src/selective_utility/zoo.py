"""Frozen classifier adapters and the model registry.

A :class:`FrozenClassifier` wraps a fixed ``nn.Module``. Its parameters have
``requires_grad`` switched off and the module is pinned to eval mode, so the
only gradients it ever produces are with respect to its input.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import derive_seed
from .data import IMAGENET_MEAN, IMAGENET_STD, DatasetHandle, batches
from .errors import CheckpointError, ContractError

log = logging.getLogger(__name__)

REGISTRY_ENV = "SELUTIL_REGISTRY"


# --------------------------------------------------------------------------
# architectures


class ToyCNNA(nn.Module):
    """Three 3x3 conv stages with max-pooling and global average pooling."""

    def __init__(self, num_classes: int, resolution: int):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.fc = nn.Linear(64, num_classes)

    def forward(self, x):
        return self.fc(self.features(x))


class ToyCNNB(nn.Module):
    """Two strided 5x5 convs with batch-norm, then a dense head over the flattened map."""

    def __init__(self, num_classes: int, resolution: int):
        super().__init__()
        side = resolution // 4
        self.features = nn.Sequential(
            nn.Conv2d(3, 24, 5, stride=2, padding=2), nn.BatchNorm2d(24), nn.ReLU(),
            nn.Conv2d(24, 48, 5, stride=2, padding=2), nn.BatchNorm2d(48), nn.ReLU(),
            nn.Flatten(),
        )
        self.fc = nn.Sequential(nn.Linear(48 * side * side, 96), nn.ReLU(), nn.Linear(96, num_classes))

    def forward(self, x):
        return self.fc(self.features(x))


class ToyMLP(nn.Module):
    def __init__(self, num_classes: int, resolution: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Flatten(),
            nn.Linear(3 * resolution * resolution, 256), nn.ReLU(),
            nn.Linear(256, 128), nn.ReLU(),
            nn.Linear(128, num_classes),
        )

    def forward(self, x):
        return self.net(x)


class LinearSoftmax(nn.Module):
    """Single linear layer over flattened pixels; used by gradient oracles."""

    def __init__(self, num_classes: int, resolution: int, channels: int = 3):
        super().__init__()
        self.fc = nn.Linear(channels * resolution * resolution, num_classes)

    def forward(self, x):
        return self.fc(x.flatten(1))


def _torchvision(name: str) -> Callable[[int, int], nn.Module]:
    def build(num_classes: int, resolution: int) -> nn.Module:
        from torchvision import models

        return getattr(models, name)(weights=None, num_classes=num_classes)

    return build


def _convnextv2(num_classes: int, resolution: int) -> nn.Module:
    try:
        import timm
    except ImportError:
        raise CheckpointError("convnextv2 needs the optional 'timm' package "
                              "(pip install timm)") from None
    return timm.create_model("convnextv2_tiny", pretrained=False, num_classes=num_classes)


ARCHITECTURES: dict[str, Callable[[int, int], nn.Module]] = {
    "toy-cnn-a": ToyCNNA,
    "toy-cnn-b": ToyCNNB,
    "toy-mlp": ToyMLP,
    "linear-softmax": LinearSoftmax,
    # full-scale architectures are declared, weights are never bundled
    "vgg16": _torchvision("vgg16"),
    "resnet152": _torchvision("resnet152"),
    "densenet121": _torchvision("densenet121"),
    "convnextv2": _convnextv2,
}
FULL_SCALE = ("vgg16", "resnet152", "densenet121", "convnextv2")
TOY_ARCHITECTURES = ("toy-cnn-a", "toy-cnn-b", "toy-mlp")

# Toy models use their own input statistics on purpose; the trainer always
# renormalizes decoded images with the target's stats, never the dataset's.
TOY_STATS = {
    "toy-cnn-a": ((0.5, 0.5, 0.5), (0.25, 0.25, 0.25)),
    "toy-cnn-b": ((0.45, 0.45, 0.45), (0.3, 0.3, 0.3)),
    "toy-mlp": ((0.5, 0.5, 0.5), (0.5, 0.5, 0.5)),
}


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    num_classes: int
    input_resolution: int
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD

    def build(self) -> nn.Module:
        if self.name not in ARCHITECTURES:
            raise CheckpointError(f"unknown architecture {self.name!r}; known: {sorted(ARCHITECTURES)}")
        return ARCHITECTURES[self.name](self.num_classes, self.input_resolution)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ArchitectureSpec:
        return cls(d["name"], int(d["num_classes"]), int(d["input_resolution"]),
                   tuple(d["mean"]), tuple(d["std"]))


# --------------------------------------------------------------------------
# frozen adapter


def parameter_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class FrozenClassifier:
    def __init__(self, model_id: str, module: nn.Module, spec: ArchitectureSpec):
        self.model_id = model_id
        self.spec = spec
        self.module = module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
            p.grad = None
        # eval() is re-applied on every call in case a caller flips the mode
        self._mean = torch.tensor(spec.mean).view(1, -1, 1, 1)
        self._std = torch.tensor(spec.std).view(1, -1, 1, 1)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def input_resolution(self) -> int:
        return self.spec.input_resolution

    @property
    def expected_input_stats(self) -> tuple[tuple[float, ...], tuple[float, ...]]:
        return self.spec.mean, self.spec.std

    def __repr__(self) -> str:
        return f"FrozenClassifier({self.model_id!r}, arch={self.spec.name!r})"

    def normalize(self, pixels: torch.Tensor) -> torch.Tensor:
        """[0, 1] pixels -> this model's input space."""
        return (pixels - self._mean.to(pixels)) / self._std.to(pixels)

    def _check(self, x: torch.Tensor) -> None:
        r = self.input_resolution
        if x.dim() != 4 or x.shape[1] != len(self.spec.mean) or x.shape[-2:] != (r, r):
            raise ContractError(f"{self.model_id} expects B x {len(self.spec.mean)} x {r} x {r}, "
                                f"got {tuple(x.shape)}")

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable forward pass (gradients reach ``x`` only)."""
        self._check(x)
        self.module.eval()
        return self.module(x)

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self(x)

    def task_loss_and_input_grad(self, x: torch.Tensor, y: torch.Tensor) -> tuple[float, torch.Tensor]:
        y = torch.as_tensor(y, dtype=torch.long)
        if y.shape != x.shape[:1] or int(y.min()) < 0 or int(y.max()) >= self.num_classes:
            raise ContractError(f"labels must be {x.shape[0]} indices in [0, {self.num_classes})")
        x = x.detach().clone().requires_grad_(True)
        with torch.enable_grad():
            loss = F.cross_entropy(self(x), y)
            (grad,) = torch.autograd.grad(loss, x)
        return loss.item(), grad

    def parameter_hash(self) -> str:
        return parameter_hash(self.module)

    def to(self, dtype: torch.dtype) -> FrozenClassifier:
        self.module.to(dtype)
        return self


# --------------------------------------------------------------------------
# registry


def load_checkpoint(spec: ArchitectureSpec, checkpoint_path: str | Path) -> nn.Module:
    module = spec.build()
    path = Path(checkpoint_path)
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    expected = module.state_dict()
    problems = []
    for key, tensor in expected.items():
        if key not in state:
            problems.append(f"{key}: missing (expected {tuple(tensor.shape)})")
        elif tuple(state[key].shape) != tuple(tensor.shape):
            problems.append(f"{key}: checkpoint {tuple(state[key].shape)} != architecture {tuple(tensor.shape)}")
    problems += [f"{key}: unexpected key" for key in state if key not in expected]
    if problems:
        raise CheckpointError(f"checkpoint {path} does not match {spec.name}: " + "; ".join(problems))
    module.load_state_dict(state)
    return module


class ModelZoo:
    """In-memory registry, persisted as ``registry.json`` next to checkpoints."""

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root else None
        self._entries: dict[str, tuple[ArchitectureSpec, str]] = {}
        self._loaded: dict[str, FrozenClassifier] = {}

    def __contains__(self, model_id: str) -> bool:
        return model_id in self._entries

    def ids(self) -> list[str]:
        return list(self._entries)

    def register_model(self, model_id: str, spec: ArchitectureSpec,
                       checkpoint_path: str | Path) -> FrozenClassifier:
        clf = FrozenClassifier(model_id, load_checkpoint(spec, checkpoint_path), spec)
        self._entries[model_id] = (spec, str(checkpoint_path))
        self._loaded[model_id] = clf
        return clf

    def get(self, model_id: str) -> FrozenClassifier:
        if model_id not in self._entries:
            raise CheckpointError(f"model {model_id!r} not registered; known: {self.ids()}")
        if model_id not in self._loaded:
            spec, ckpt = self._entries[model_id]
            self._loaded[model_id] = FrozenClassifier(model_id, load_checkpoint(spec, self._resolve(ckpt)), spec)
        return self._loaded[model_id]

    def _resolve(self, ckpt: str) -> Path:
        path = Path(ckpt)
        return path if path.is_absolute() or self.root is None else self.root / path

    def save(self, path: str | Path | None = None) -> Path:
        path = Path(path) if path else self.root / "registry.json"
        payload = {}
        for model_id, (spec, ckpt) in self._entries.items():
            ckpt_path = Path(ckpt)
            try:
                ckpt = str(ckpt_path.resolve().relative_to(path.parent.resolve()))
            except ValueError:
                ckpt = str(ckpt_path.resolve())
            payload[model_id] = {"architecture": spec.to_dict(), "checkpoint": ckpt}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path | None = None) -> ModelZoo:
        if path is None:
            path = os.environ.get(REGISTRY_ENV)
            if not path:
                raise CheckpointError(f"no registry given (pass --registry or set {REGISTRY_ENV})")
        path = Path(path)
        if path.is_dir():
            path = path / "registry.json"
        if not path.exists():
            raise CheckpointError(f"registry {path} not found")
        zoo = cls(path.parent)
        for model_id, entry in json.loads(path.read_text()).items():
            zoo._entries[model_id] = (ArchitectureSpec.from_dict(entry["architecture"]), entry["checkpoint"])
        return zoo


# --------------------------------------------------------------------------
# toy fitting


def evaluate_plain(clf: FrozenClassifier, handle: DatasetHandle, batch_size: int = 500) -> float:
    correct = 0
    for x, y in batches(handle, batch_size, seed=0, epoch=0, shuffle=False):
        logits = clf.predict(clf.normalize(handle.to_pixels(x)))
        correct += int((logits.argmax(1) == y).sum())
    return 100.0 * correct / handle.size


def fit_toy_classifier(arch: str, train: DatasetHandle, epochs: int = 8, seed: int = 0,
                       lr: float = 2e-3, batch_size: int = 128,
                       mean: Sequence[float] | None = None, std: Sequence[float] | None = None,
                       log_fn: Callable[[str], None] | None = None) -> tuple[nn.Module, ArchitectureSpec]:
    """Fit a desk-scale classifier on ``train``. Returns the module and its spec."""
    default_mean, default_std = TOY_STATS.get(arch, (train.mean, train.std))
    spec = ArchitectureSpec(arch, train.num_classes, train.resolution,
                            tuple(mean or default_mean), tuple(std or default_std))
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, "zoo-init:" + arch))
        module = spec.build()
    m_mean = torch.tensor(spec.mean).view(1, -1, 1, 1)
    m_std = torch.tensor(spec.std).view(1, -1, 1, 1)
    opt = torch.optim.Adam(module.parameters(), lr=lr)
    steps = epochs * -(-train.size // batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps)
    for epoch in range(epochs):
        module.train()
        total, n = 0.0, 0
        for x, y in batches(train, batch_size, derive_seed(seed, "zoo:" + arch), epoch):
            inp = (train.to_pixels(x) - m_mean) / m_std
            loss = F.cross_entropy(module(inp), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(y)
            n += len(y)
        if log_fn:
            log_fn(f"{arch} epoch {epoch + 1}/{epochs} loss {total / n:.4f}")
    return module.eval(), spec


def build_toy_zoo(root: str | Path, train: DatasetHandle, archs: Sequence[str] = TOY_ARCHITECTURES,
                  epochs: int = 8, seed: int = 0,
                  log_fn: Callable[[str], None] | None = None) -> ModelZoo:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    zoo = ModelZoo(root)
    for arch in archs:
        module, spec = fit_toy_classifier(arch, train, epochs=epochs, seed=seed, log_fn=log_fn)
        ckpt = root / f"{arch}.pt"
        torch.save(module.state_dict(), ckpt)
        zoo.register_model(arch, spec, ckpt)
    zoo.save()
    return zoo
