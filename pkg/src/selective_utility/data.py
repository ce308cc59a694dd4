"""Datasets, preprocessing and seeded mini-batch streams.

Handles keep raw ``uint8`` images at their native resolution and preprocess
(resize + per-channel standardization) lazily per batch, so full-size
datasets at 224px never have to be materialized as floats.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import derive_seed
from .errors import ContractError, DataError

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
# measured on the first 10k toy-shapes training images
TOY_MEAN = (0.502, 0.499, 0.499)
TOY_STD = (0.290, 0.289, 0.294)

TOY_CLASSES = (
    "disc", "square", "triangle", "plus", "ring",
    "h-stripes", "v-stripes", "x-cross", "diamond", "checker",
)
TOY_SIZES = {"train": 10_000, "test": 2_000}

DATA_ROOT_ENV = "SELUTIL_DATA_ROOT"


def default_data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, Path.home() / ".cache" / "selective_utility" / "data"))


@dataclass(frozen=True)
class Sample:
    image: torch.Tensor
    label: int


@dataclass
class DatasetHandle:
    dataset_id: str
    split: str
    num_classes: int
    images: torch.Tensor  # uint8, N x C x h x w, native resolution
    labels: torch.Tensor  # int64, N
    resolution: int
    mean: tuple[float, ...]
    std: tuple[float, ...]
    names: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise DataError(f"{self.dataset_id}: num_classes must be >= 2")
        if len(self.labels) == 0:
            raise DataError(f"{self.dataset_id}/{self.split}: empty split")
        if self.images.dtype != torch.uint8:
            raise DataError("raw images must be stored as uint8")
        if int(self.labels.max()) >= self.num_classes or int(self.labels.min()) < 0:
            raise DataError(f"{self.dataset_id}: label outside [0, {self.num_classes})")

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])

    @property
    def normalization_stats(self) -> tuple[tuple[float, ...], tuple[float, ...]]:
        return self.mean, self.std

    def __len__(self) -> int:
        return self.size

    def preprocess(self, raw: torch.Tensor) -> torch.Tensor:
        return preprocess(raw, self.resolution, self.mean, self.std)

    def __getitem__(self, idx: int) -> Sample:
        image = self.preprocess(self.images[idx : idx + 1])[0]
        return Sample(image, int(self.labels[idx]))

    def batch(self, indices: torch.Tensor | Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
        idx = torch.as_tensor(indices, dtype=torch.long)
        return self.preprocess(self.images[idx]), self.labels[idx]

    def to_pixels(self, x: torch.Tensor) -> torch.Tensor:
        """Undo standardization: model-input space back to [0, 1] pixels."""
        return x * _stat(self.std, x) + _stat(self.mean, x)

    def subset(self, limit: int) -> DatasetHandle:
        if limit <= 0 or limit >= self.size:
            return self
        return DatasetHandle(self.dataset_id, self.split, self.num_classes, self.images[:limit],
                             self.labels[:limit], self.resolution, self.mean, self.std,
                             None if self.names is None else self.names[:limit])


def _stat(values: Sequence[float], like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(values, dtype=like.dtype, device=like.device).view(1, -1, 1, 1)


def preprocess(raw: torch.Tensor, resolution: int, mean: Sequence[float],
               std: Sequence[float]) -> torch.Tensor:
    """Resize ``uint8`` images to ``resolution`` and standardize per channel.

    Only raw ``uint8`` input is accepted; a float tensor has already been
    through this function and is rejected rather than normalized twice.
    """
    if raw.dtype != torch.uint8:
        raise ContractError(f"preprocess expects raw uint8 images, got {raw.dtype}")
    x = raw.float().div_(255.0)
    if x.shape[-1] != resolution or x.shape[-2] != resolution:
        antialias = x.shape[-1] > resolution
        x = F.interpolate(x, size=(resolution, resolution), mode="bilinear",
                          align_corners=False, antialias=antialias).clamp_(0.0, 1.0)
    return (x - _stat(mean, x)) / _stat(std, x)


def batches(handle: DatasetHandle, batch_size: int, seed: int, epoch: int,
            shuffle: bool = True) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """One epoch of mini-batches in a permutation fixed by ``(seed, epoch)``.

    The final partial batch is kept.
    """
    if batch_size < 1:
        raise ContractError("batch_size must be positive")
    if shuffle:
        gen = torch.Generator().manual_seed(derive_seed(seed, "shuffle", epoch))
        order = torch.randperm(handle.size, generator=gen)
    else:
        order = torch.arange(handle.size)
    for start in range(0, handle.size, batch_size):
        yield handle.batch(order[start : start + batch_size])


def epoch_order(handle: DatasetHandle, seed: int, epoch: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(derive_seed(seed, "shuffle", epoch))
    return torch.randperm(handle.size, generator=gen)


# --------------------------------------------------------------------------
# toy-shapes


def _toy_images(n: int, resolution: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    r = resolution
    labels = rng.integers(0, len(TOY_CLASSES), size=n)
    yy, xx = np.meshgrid(np.arange(r) + 0.5, np.arange(r) + 0.5, indexing="ij")
    yy, xx = yy[None] / r, xx[None] / r

    size = rng.uniform(0.22, 0.36, size=(n, 1, 1))
    cy = rng.uniform(0.5 - (0.5 - size[:, 0, 0]) * 0.6, 0.5 + (0.5 - size[:, 0, 0]) * 0.6)[:, None, None]
    cx = rng.uniform(0.5 - (0.5 - size[:, 0, 0]) * 0.6, 0.5 + (0.5 - size[:, 0, 0]) * 0.6)[:, None, None]
    dy, dx = yy - cy, xx - cx
    ady, adx = np.abs(dy), np.abs(dx)
    rad = np.sqrt(dy**2 + dx**2)
    inside = np.maximum(ady, adx) <= size
    period = size / rng.uniform(1.6, 2.4, size=(n, 1, 1))
    thick = size * 0.28

    shapes = {
        0: rad <= size,
        1: inside * (np.maximum(ady, adx) <= size * 0.85),
        2: (dy <= size * 0.8) & (dy >= -size * 0.8) & (adx <= (dy + size * 0.8) * 0.62),
        3: inside & ((ady <= thick) | (adx <= thick)),
        4: (rad <= size) & (rad >= size * 0.55),
        5: inside & (np.mod(dy + size, period) < period / 2),
        6: inside & (np.mod(dx + size, period) < period / 2),
        7: inside & ((np.abs(dy - dx) <= thick * 0.75) | (np.abs(dy + dx) <= thick * 0.75)),
        8: (ady + adx) <= size * 1.15,
        9: inside & ((np.floor((dy + size) / period) + np.floor((dx + size) / period)) % 2 == 0),
    }
    mask = np.zeros((n, r, r), dtype=bool)
    for cls, m in shapes.items():
        sel = labels == cls
        mask[sel] = np.broadcast_to(m, (n, r, r))[sel]

    bg = rng.uniform(0.0, 1.0, size=(n, 3, 1, 1))
    fg = rng.uniform(0.0, 1.0, size=(n, 3, 1, 1))
    # keep foreground/background contrast above a floor in mean intensity
    flip = np.abs(fg.mean(1) - bg.mean(1)) < 0.3
    fg[flip[:, 0, 0]] = np.clip(1.0 - bg[flip[:, 0, 0]], 0, 1)
    img = np.where(mask[:, None], fg, bg)
    img = img + rng.normal(0.0, 0.06, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return (img * 255.0 + 0.5).astype(np.uint8), labels.astype(np.int64)


def toy_shapes(split: str, resolution: int = 32, size: int | None = None) -> DatasetHandle:
    """Procedural 10-class shapes dataset, fixed per split (no download)."""
    if split not in TOY_SIZES:
        raise DataError(f"unknown split {split!r}")
    n = TOY_SIZES[split] if size is None else size
    rng = np.random.default_rng(derive_seed(0, "toy-shapes", 0 if split == "train" else 1))
    chunks, labels = [], []
    for start in range(0, n, 2000):
        img, lab = _toy_images(min(2000, n - start), resolution, rng)
        chunks.append(img)
        labels.append(lab)
    images = torch.from_numpy(np.concatenate(chunks))
    return DatasetHandle("toy-shapes", split, len(TOY_CLASSES), images,
                         torch.from_numpy(np.concatenate(labels)), resolution, TOY_MEAN, TOY_STD)


# --------------------------------------------------------------------------
# CIFAR and image folders

_CIFAR = {"cifar10": ("CIFAR10", 10), "cifar100": ("CIFAR100", 100)}


def _cifar(dataset_id: str, split: str, resolution: int, root: Path) -> DatasetHandle:
    from torchvision import datasets

    cls_name, num_classes = _CIFAR[dataset_id]
    try:
        ds = getattr(datasets, cls_name)(str(root), train=split == "train", download=False)
    except RuntimeError as exc:
        raise DataError(f"{dataset_id} not found under {root} ({exc}); "
                        f"run `selutil fetch-data {dataset_id} --root {root}` first") from None
    images = torch.from_numpy(np.ascontiguousarray(ds.data.transpose(0, 3, 1, 2)))
    labels = torch.as_tensor(ds.targets, dtype=torch.long)
    return DatasetHandle(dataset_id, split, num_classes, images, labels, resolution,
                         IMAGENET_MEAN, IMAGENET_STD)


def fetch_data(dataset_id: str, root: str | Path | None = None) -> Path:
    from torchvision import datasets

    root = Path(root) if root else default_data_root()
    if dataset_id == "toy-shapes":
        log.info("toy-shapes is generated procedurally; nothing to fetch")
        return root
    if dataset_id not in _CIFAR:
        raise DataError(f"no downloader for {dataset_id!r}; supported: {sorted(_CIFAR)}")
    root.mkdir(parents=True, exist_ok=True)
    cls = getattr(datasets, _CIFAR[dataset_id][0])
    for train in (True, False):
        cls(str(root), train=train, download=True)
    return root


def read_labels_csv(folder: Path) -> list[tuple[str, int]]:
    path = folder / "labels.csv"
    if not path.exists():
        raise DataError(f"{folder} has no labels.csv (columns: filename,label)")
    with path.open(newline="") as fh:
        return [(row["filename"], int(row["label"])) for row in csv.DictReader(fh)]


def write_labels_csv(folder: Path, rows: Sequence[tuple[str, int]]) -> Path:
    path = folder / "labels.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "label"])
        writer.writerows(rows)
    return path


def read_image(path: Path) -> torch.Tensor:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def image_folder(folder: str | Path, resolution: int, num_classes: int,
                 mean: Sequence[float], std: Sequence[float], skip_corrupt: bool = True,
                 dataset_id: str = "image-folder") -> DatasetHandle:
    """Labelled PNG/JPEG folder (``labels.csv`` alongside the images)."""
    folder = Path(folder)
    images, labels, names = [], [], []
    for name, label in read_labels_csv(folder):
        try:
            img = read_image(folder / name)
        except Exception as exc:  # PIL raises a zoo of types for bad files
            if not skip_corrupt:
                raise DataError(f"corrupt record {name}: {exc}") from None
            log.warning("skipping unreadable image %s: %s", name, exc)
            continue
        if images and img.shape != images[0].shape:
            img = F.interpolate(img[None].float(), size=images[0].shape[-2:], mode="bilinear",
                                align_corners=False).round().clamp(0, 255).to(torch.uint8)[0]
        images.append(img)
        labels.append(label)
        names.append(name)
    if not images:
        raise DataError(f"no readable images in {folder}")
    return DatasetHandle(dataset_id, "test", num_classes, torch.stack(images),
                         torch.as_tensor(labels, dtype=torch.long), resolution,
                         tuple(mean), tuple(std), tuple(names))


def export_images(handle: DatasetHandle, folder: str | Path) -> Path:
    """Write a split as PNG files plus ``labels.csv`` (used by transform/eval round trips)."""
    from PIL import Image

    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(handle.size):
        name = f"{handle.split}_{i:05d}.png"
        arr = handle.images[i].permute(1, 2, 0).numpy()
        Image.fromarray(arr).save(folder / name)
        rows.append((name, int(handle.labels[i])))
    write_labels_csv(folder, rows)
    return folder


def load_dataset(dataset_id: str, split: str, resolution: int, root: str | Path | None = None,
                 skip_corrupt: bool = False) -> DatasetHandle:
    if split not in ("train", "test"):
        raise DataError(f"unknown split {split!r}")
    if dataset_id == "toy-shapes":
        return toy_shapes(split, resolution)
    if dataset_id in _CIFAR:
        return _cifar(dataset_id, split, resolution, Path(root) if root else default_data_root())
    if dataset_id in ("tiny-imagenet", "voc2012"):
        raise DataError(f"{dataset_id} recipes are documented but not bundled; "
                        "supply an image folder with labels.csv instead")
    raise DataError(f"unknown dataset {dataset_id!r}")
