"""Two-phase training with periodic saliency/KL mask recomputation.

Epochs are 1-indexed. Epochs ``1..warm_epochs`` train with an all-ones mask;
afterwards the mask is recomputed on the schedule given by
:func:`selective_utility.masking.is_recompute_epoch` and held fixed between
recomputations. Only encoder and decoder parameters are optimized.
"""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__, masking
from .artifact import EpochRecord, TrainedArtifact, build_networks
from .config import Manifest, RunConfig, config_hash, derive_seed, run_manifest, save_config
from .data import DatasetHandle, batches
from .decoder import TaskDecoder, renormalize_for_target
from .encoder import VariationalEncoder, reparameterize
from .errors import ResumeError, TrainingAborted
from .masking import MaskState, kl_per_dimension
from .zoo import FrozenClassifier

log = logging.getLogger(__name__)


def task_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of the frozen target on decoded images."""
    return F.cross_entropy(logits, labels)


def kl_loss(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """Per-sample KL summed over latent dimensions, averaged over the batch."""
    return kl_per_dimension(mu, log_var).sum(dim=1).mean()


# The complete objective. There is intentionally no pixel-space term.
LOSS_REGISTRY: dict[str, Callable[..., torch.Tensor]] = {
    "task_cross_entropy": task_loss,
    "kl": kl_loss,
}


def total_loss(task, kl, lambda_kl: float):
    return task + lambda_kl * kl


@dataclass
class StepResult:
    task: float
    kl: float
    total: float
    correct: int
    count: int


@dataclass
class TrainState:
    epoch: int
    mask: torch.Tensor
    optimizer: torch.optim.Optimizer
    noise: torch.Generator
    history: list[EpochRecord] = field(default_factory=list)
    mask_states: list[MaskState] = field(default_factory=list)
    best_acc: float = -1.0

    def phase(self, cfg: RunConfig) -> str:
        return "warmup" if self.epoch <= cfg.warm_epochs else "masking"


def make_optimizer(encoder: VariationalEncoder, decoder: TaskDecoder, cfg: RunConfig) -> torch.optim.Adam:
    params = list(encoder.parameters()) + list(decoder.parameters())
    return torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


def initial_state(encoder: VariationalEncoder, decoder: TaskDecoder, cfg: RunConfig) -> TrainState:
    return TrainState(
        epoch=0,
        mask=torch.ones(cfg.latent_dim),
        optimizer=make_optimizer(encoder, decoder, cfg),
        noise=torch.Generator().manual_seed(derive_seed(cfg.seed, "noise")),
    )


def forward_losses(x, y, encoder, decoder, target, mask, lambda_kl, noise=None, deterministic=False):
    mu, log_var = encoder(x)
    z = reparameterize(mu, log_var, noise, deterministic=deterministic)
    x_dec = decoder(z * mask.to(z))
    logits = target(renormalize_for_target(x_dec, *target.expected_input_stats))
    task = LOSS_REGISTRY["task_cross_entropy"](logits, y)
    kl = LOSS_REGISTRY["kl"](mu, log_var)
    return task, kl, total_loss(task, kl, lambda_kl), logits, (mu, log_var)


def train_step(state: TrainState, x: torch.Tensor, y: torch.Tensor, encoder: VariationalEncoder,
               decoder: TaskDecoder, target: FrozenClassifier, cfg: RunConfig) -> StepResult:
    encoder.train()
    decoder.train()
    task, kl, loss, logits, (mu, log_var) = forward_losses(
        x, y, encoder, decoder, target, state.mask, cfg.lambda_kl, state.noise)
    if not torch.isfinite(loss):
        raise TrainingAborted(
            f"non-finite loss at epoch {state.epoch}",
            {"epoch": state.epoch, "task": task.item(), "kl": kl.item(),
             "mu_abs_max": mu.abs().max().item(), "log_var_min": log_var.min().item(),
             "log_var_max": log_var.max().item(), "batch_size": int(x.shape[0])},
        )
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip > 0:
        params = [p for g in state.optimizer.param_groups for p in g["params"]]
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    state.optimizer.step()
    task_v, kl_v = task.item(), kl.item()
    return StepResult(task_v, kl_v, total_loss(task_v, kl_v, cfg.lambda_kl),
                      int((logits.argmax(1) == y).sum()), int(y.shape[0]))


@contextlib.contextmanager
def determinism(enabled: bool) -> Iterator[None]:
    if not enabled:
        yield
        return
    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev_det)
        torch.set_num_threads(prev_threads)


# --------------------------------------------------------------------------
# run directory


class RunDir:
    """``manifest.json``, ``config.cfg``, ``checkpoints/epoch_NNN/``, ``masks/epoch_NNN.json``, ``losses.csv``."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    @property
    def manifest_path(self) -> Path:
        return self.path / "manifest.json"

    @property
    def artifact_path(self) -> Path:
        return self.path / "artifact"

    def checkpoints(self) -> list[Path]:
        root = self.path / "checkpoints"
        return sorted(root.glob("epoch_*")) if root.exists() else []

    def init(self, cfg: RunConfig, manifest: Manifest) -> None:
        (self.path / "checkpoints").mkdir(parents=True, exist_ok=True)
        (self.path / "masks").mkdir(exist_ok=True)
        save_config(cfg, self.path / "config.cfg")
        manifest.save(self.manifest_path)
        with (self.path / "losses.csv").open("w", newline="") as fh:
            csv.writer(fh).writerow(["epoch", "mean_task", "mean_kl", "mean_total"])

    def append_losses(self, rec: EpochRecord) -> None:
        with (self.path / "losses.csv").open("a", newline="") as fh:
            csv.writer(fh).writerow([rec.epoch, repr(rec.mean_task), repr(rec.mean_kl), repr(rec.mean_total)])

    def save_mask(self, ms: MaskState) -> None:
        ms.save(self.path / "masks" / f"epoch_{ms.computed_at_epoch:03d}.json")

    def save_checkpoint(self, state: TrainState, encoder, decoder, keep: int, is_best: bool) -> Path:
        folder = self.path / "checkpoints" / f"epoch_{state.epoch:03d}"
        folder.mkdir(parents=True, exist_ok=True)
        torch.save(encoder.state_dict(), folder / "encoder.pt")
        torch.save(decoder.state_dict(), folder / "decoder.pt")
        torch.save(state.optimizer.state_dict(), folder / "optimizer.pt")
        torch.save(state.noise.get_state(), folder / "noise.pt")
        doc = {
            "epoch": state.epoch,
            "mask": state.mask.round().to(torch.int64).tolist(),
            "history": [r.to_dict() for r in state.history],
            "mask_epochs": [m.computed_at_epoch for m in state.mask_states],
            "best_acc": state.best_acc,
        }
        (folder / "state.json").write_text(json.dumps(doc) + "\n")
        if is_best:
            best = self.path / "checkpoints" / "best"
            if best.exists():
                shutil.rmtree(best)
            shutil.copytree(folder, best)
        for old in self.checkpoints()[:-keep]:
            shutil.rmtree(old)
        return folder

    def load_latest(self, state: TrainState, encoder, decoder) -> bool:
        ckpts = self.checkpoints()
        if not ckpts:
            return False
        folder = ckpts[-1]
        doc = json.loads((folder / "state.json").read_text())
        encoder.load_state_dict(torch.load(folder / "encoder.pt", weights_only=True))
        decoder.load_state_dict(torch.load(folder / "decoder.pt", weights_only=True))
        state.optimizer.load_state_dict(torch.load(folder / "optimizer.pt", weights_only=True))
        state.noise.set_state(torch.load(folder / "noise.pt", weights_only=True))
        state.epoch = int(doc["epoch"])
        state.mask = torch.tensor(doc["mask"], dtype=torch.float32)
        state.history = [EpochRecord(**r) for r in doc["history"]]
        state.best_acc = float(doc["best_acc"])
        state.mask_states = [MaskState.load(self.path / "masks" / f"epoch_{e:03d}.json")
                             for e in doc["mask_epochs"]]
        # drop loss rows written after the checkpoint (a crash between epochs)
        with (self.path / "losses.csv").open(newline="") as fh:
            rows = list(csv.reader(fh))
        keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= state.epoch]
        with (self.path / "losses.csv").open("w", newline="") as fh:
            csv.writer(fh).writerows(keep)
        return True


def is_complete(run_dir: str | Path) -> bool:
    return (Path(run_dir) / "artifact" / "artifact.json").exists()


# --------------------------------------------------------------------------


def run_training(cfg: RunConfig, dataset: DatasetHandle, target: FrozenClassifier,
                 run_dir: str | Path | None = None, resume: bool = False,
                 log_fn: Callable[[str], None] | None = None,
                 on_step: Callable[[TrainState, StepResult], None] | None = None) -> TrainedArtifact:
    """Train encoder/decoder against the frozen ``target``; see module docstring."""
    if target.input_resolution != cfg.input_resolution:
        raise TrainingAborted(f"target {target.model_id} takes {target.input_resolution}px, "
                              f"config says {cfg.input_resolution}px")
    manifest = run_manifest(
        cfg, __version__,
        mask_at_phase_start=cfg.mask_at_phase_start,
        optimizer_reset_on_mask_update=False,
        saliency_forward_mask="identity",
        score_encoding="deterministic (z = mu)",
    )
    encoder, decoder = build_networks(cfg)
    manifest.notes["decoder"] = decoder.describe()
    manifest.notes["encoder"] = {"backbone": cfg.encoder_backbone, "feature_width": encoder.feature_width}
    state = initial_state(encoder, decoder, cfg)

    rd = RunDir(run_dir) if run_dir is not None else None
    if rd is not None:
        if resume and rd.manifest_path.exists():
            recorded = Manifest.load(rd.manifest_path)
            if recorded.config_hash != config_hash(cfg):
                raise ResumeError(f"{rd.path} was created with config hash {recorded.config_hash[:12]}, "
                                  f"current config hashes to {config_hash(cfg)[:12]}")
            manifest = recorded
            if rd.load_latest(state, encoder, decoder):
                log.info("resuming %s after epoch %d", rd.path, state.epoch)
        else:
            rd.init(cfg, manifest)

    hash_before = target.parameter_hash()
    emit = log_fn or (lambda msg: log.info(msg))
    with determinism(cfg.deterministic):
        for epoch in range(state.epoch + 1, cfg.total_epochs + 1):
            state.epoch = epoch
            if masking.is_recompute_epoch(epoch, cfg):
                ms = masking.recompute_mask(encoder, decoder, target, dataset, cfg, epoch)
                state.mask = ms.mask_tensor()
                state.mask_states.append(ms)
                if rd is not None:
                    rd.save_mask(ms)
            sums = np.zeros(2)
            correct = count = 0
            for x, y in batches(dataset, cfg.batch_size, derive_seed(cfg.seed, "data"), epoch):
                try:
                    res = train_step(state, x, y, encoder, decoder, target, cfg)
                except TrainingAborted as exc:
                    if rd is not None:
                        (rd.path / "abort_diagnostics.json").write_text(json.dumps(exc.diagnostics, indent=1))
                    raise
                sums += (res.task * res.count, res.kl * res.count)
                correct += res.correct
                count += res.count
                if on_step is not None:
                    on_step(state, res)
            mean_task, mean_kl = sums / count
            rec = EpochRecord(epoch, state.phase(cfg), float(mean_task), float(mean_kl),
                              float(total_loss(mean_task, mean_kl, cfg.lambda_kl)),
                              100.0 * correct / count, int(state.mask.sum()))
            state.history.append(rec)
            emit(f"epoch {epoch}/{cfg.total_epochs} [{rec.phase}] task={rec.mean_task:.4f} "
                 f"kl={rec.mean_kl:.4f} total={rec.mean_total:.4f} train_acc={rec.train_acc:.2f}% "
                 f"kept={rec.kept_dims}/{cfg.latent_dim}")
            if rd is not None:
                rd.append_losses(rec)
                is_best = rec.train_acc > state.best_acc
                state.best_acc = max(state.best_acc, rec.train_acc)
                rd.save_checkpoint(state, encoder, decoder, cfg.checkpoint_keep, is_best)

    if target.parameter_hash() != hash_before:
        raise TrainingAborted(f"target model {target.model_id} parameters changed during training")
    manifest.notes["target_param_hash"] = hash_before
    artifact = TrainedArtifact(
        encoder=encoder.eval(),
        decoder=decoder.eval(),
        mask=state.mask.clone(),
        config=cfg,
        manifest=manifest,
        input_stats=dataset.normalization_stats,
        mask_state=state.mask_states[-1] if state.mask_states else None,
        history=list(state.history),
        mask_history=list(state.mask_states),
    )
    if rd is not None:
        artifact.save(rd.artifact_path)
    return artifact
