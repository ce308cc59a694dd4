"""Global latent mask from fused per-dimension KL and task-loss saliency.

Scores are always computed with deterministic encoding (z = mu) and with
every network in eval mode, so a recomputation is a pure function of the
current weights and the dataset.
"""

from __future__ import annotations

import contextlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import RunConfig
from .data import DatasetHandle, batches
from .decoder import TaskDecoder, renormalize_for_target
from .encoder import VariationalEncoder
from .errors import ContractError, SchedulingError
from .zoo import FrozenClassifier

log = logging.getLogger(__name__)


def kl_per_dimension(mu, log_var) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) for each coordinate: ½(mu² + σ² − log σ² − 1)."""
    mu = torch.as_tensor(mu)
    log_var = torch.as_tensor(log_var, dtype=mu.dtype)
    if mu.shape != log_var.shape:
        raise ContractError(f"mu {tuple(mu.shape)} and log_var {tuple(log_var.shape)} differ")
    # expm1(x) - x stays >= 0 in floating point, unlike exp(x) - x - 1 for tiny x
    return 0.5 * (mu.pow(2) + (torch.expm1(log_var) - log_var))


@contextlib.contextmanager
def eval_mode(*modules: nn.Module) -> Iterator[None]:
    previous = [m.training for m in modules]
    for m in modules:
        m.eval()
    try:
        yield
    finally:
        for m, was_training in zip(modules, previous):
            m.train(was_training)


def _score_batches(dataset: DatasetHandle, batch_size: int):
    if dataset.size == 0:
        raise ContractError("score computation needs a non-empty dataset")
    return batches(dataset, batch_size, seed=0, epoch=0, shuffle=False)


def global_kl(encoder: VariationalEncoder, dataset: DatasetHandle, batch_size: int = 256) -> np.ndarray:
    """Mean per-dimension KL over every sample in ``dataset``."""
    total = None
    with eval_mode(encoder), torch.no_grad():
        for x, _ in _score_batches(dataset, batch_size):
            mu, log_var = encoder(x)
            part = kl_per_dimension(mu.double(), log_var.double()).sum(0)
            total = part if total is None else total + part
    return (total / dataset.size).numpy()


def global_saliency(encoder: VariationalEncoder, decoder: TaskDecoder, target: FrozenClassifier,
                    dataset: DatasetHandle, batch_size: int = 256) -> np.ndarray:
    """Mean over samples of ``|d loss_b / d z_i|`` with z = mu and no mask applied.

    ``loss_b`` is each sample's own cross-entropy, so the score does not depend
    on how the dataset is batched.
    """
    total = None
    mean, std = target.expected_input_stats
    with eval_mode(encoder, decoder):
        for x, y in _score_batches(dataset, batch_size):
            with torch.no_grad():
                mu, _ = encoder(x)
            z = mu.detach().requires_grad_(True)
            with torch.enable_grad():
                logits = target(renormalize_for_target(decoder(z), mean, std))
                loss = F.cross_entropy(logits, y, reduction="sum")
                (grad,) = torch.autograd.grad(loss, z)
            part = grad.abs().double().sum(0)
            total = part if total is None else total + part
    return (total / dataset.size).numpy()


def minmax_normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        # degenerate: no ranking information
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def fuse_scores(kl_vec, sal_vec, gamma: float) -> np.ndarray:
    kl_vec, sal_vec = np.asarray(kl_vec, dtype=np.float64), np.asarray(sal_vec, dtype=np.float64)
    if kl_vec.shape != sal_vec.shape:
        raise ContractError("score vectors differ in length")
    if not 0.0 <= gamma <= 1.0:
        raise ContractError(f"gamma={gamma} outside [0, 1]")
    if gamma == 1.0:
        return minmax_normalize(kl_vec)
    if gamma == 0.0:
        return minmax_normalize(sal_vec)
    fused = gamma * minmax_normalize(kl_vec) + (1.0 - gamma) * minmax_normalize(sal_vec)
    return np.clip(fused, 0.0, 1.0)


def threshold_mask(importance, threshold: float) -> np.ndarray:
    """``M_i = I_i >= T * max(I)``; all-ones when ``max(I) == 0``."""
    importance = np.asarray(importance, dtype=np.float64)
    top = importance.max()
    if top <= 0.0:
        log.warning("all importance scores are zero; keeping every latent dimension")
        return np.ones(importance.shape, dtype=bool)
    return importance >= threshold * top


@dataclass(frozen=True)
class MaskState:
    kl_score: np.ndarray
    sal_score: np.ndarray
    importance: np.ndarray
    mask: np.ndarray
    computed_at_epoch: int
    gamma: float
    threshold: float
    saliency_computed: bool = True
    num_samples: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def kept(self) -> int:
        return int(self.mask.sum())

    def mask_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.mask.astype(np.float32)).to(dtype)

    def to_dict(self) -> dict:
        return {
            "epoch": self.computed_at_epoch,
            "gamma": self.gamma,
            "threshold": self.threshold,
            "mask": [int(b) for b in self.mask],
            "kl_score": [float(v) for v in self.kl_score],
            "sal_score": [float(v) for v in self.sal_score],
            "importance": [float(v) for v in self.importance],
            "saliency_computed": self.saliency_computed,
            "num_samples": self.num_samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> MaskState:
        return cls(
            kl_score=np.asarray(d["kl_score"], dtype=np.float64),
            sal_score=np.asarray(d["sal_score"], dtype=np.float64),
            importance=np.asarray(d["importance"], dtype=np.float64),
            mask=np.asarray(d["mask"], dtype=bool),
            computed_at_epoch=int(d["epoch"]),
            gamma=float(d["gamma"]),
            threshold=float(d["threshold"]),
            saliency_computed=bool(d.get("saliency_computed", True)),
            num_samples=int(d.get("num_samples", 0)),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> MaskState:
        return cls.from_dict(json.loads(Path(path).read_text()))


def is_recompute_epoch(epoch: int, cfg: RunConfig) -> bool:
    """Whether the mask is (re)computed at the start of 1-indexed ``epoch``."""
    if cfg.mask_mode == "none" or epoch <= cfg.warm_epochs or epoch > cfg.total_epochs:
        return False
    first = epoch == cfg.warm_epochs + 1
    if cfg.mask_mode == "static":
        return first
    literal = (epoch - cfg.warm_epochs) % cfg.mask_update_freq == 0
    return literal or (first and cfg.mask_at_phase_start)


def recompute_epochs(cfg: RunConfig) -> list[int]:
    return [e for e in range(1, cfg.total_epochs + 1) if is_recompute_epoch(e, cfg)]


def score_dataset(dataset: DatasetHandle, cfg: RunConfig) -> DatasetHandle:
    if cfg.score_subsample and cfg.score_subsample < dataset.size:
        return dataset.subset(cfg.score_subsample)
    return dataset


def recompute_mask(encoder: VariationalEncoder, decoder: TaskDecoder, target: FrozenClassifier,
                   dataset: DatasetHandle, cfg: RunConfig, epoch: int) -> MaskState:
    if not is_recompute_epoch(epoch, cfg):
        raise SchedulingError(f"mask recomputation not scheduled at epoch {epoch} "
                              f"(mode={cfg.mask_mode}, E_warm={cfg.warm_epochs}, freq={cfg.mask_update_freq})")
    data = score_dataset(dataset, cfg)
    kl = global_kl(encoder, data, cfg.score_batch_size)
    if cfg.gamma < 1.0:
        sal = global_saliency(encoder, decoder, target, data, cfg.score_batch_size)
        computed = True
    else:
        # KL-only: saliency carries zero weight and is skipped outright
        sal = np.zeros_like(kl)
        computed = False
    importance = fuse_scores(kl, sal, cfg.gamma)
    mask = threshold_mask(importance, cfg.threshold)
    return MaskState(kl, sal, importance, mask, epoch, cfg.gamma, cfg.threshold, computed, data.size)
