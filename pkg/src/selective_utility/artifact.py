"""Trained transform artifacts: encoder + decoder + final mask + manifest."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import Manifest, RunConfig, derive_seed
from .decoder import TaskDecoder
from .encoder import VariationalEncoder, reparameterize
from .errors import CheckpointError
from .masking import MaskState, eval_mode

ARTIFACT_SCHEMA = 1


def build_networks(cfg: RunConfig, seed: int | None = None) -> tuple[VariationalEncoder, TaskDecoder]:
    """Fresh encoder/decoder with fan-in scaled init drawn from the run's init stream."""
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(cfg.seed if seed is None else seed, "init"))
        encoder = VariationalEncoder(cfg.latent_dim, cfg.encoder_backbone, cfg.encoder_width,
                                     cfg.encoder_blocks)
        decoder = TaskDecoder(cfg.latent_dim, cfg.input_resolution, base=cfg.decoder_base,
                              proj_channels=cfg.decoder_proj_channels, channels=cfg.decoder_channels)
    return encoder, decoder


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    mean_task: float
    mean_kl: float
    mean_total: float
    train_acc: float
    kept_dims: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainedArtifact:
    encoder: VariationalEncoder
    decoder: TaskDecoder
    mask: torch.Tensor  # float 0/1 vector of length d
    config: RunConfig
    manifest: Manifest
    input_stats: tuple[tuple[float, ...], tuple[float, ...]]
    mask_state: MaskState | None = None
    history: list[EpochRecord] = field(default_factory=list)
    mask_history: list[MaskState] = field(default_factory=list)

    @property
    def target_model_id(self) -> str:
        return self.config.target_model_id

    @property
    def output_resolution(self) -> int:
        return self.decoder.out_resolution

    def transform(self, x: torch.Tensor, generator: torch.Generator | None = None,
                  stochastic: bool = False) -> torch.Tensor:
        """Standardized input batch -> decoded batch in [-1, 1] (eval mode)."""
        with eval_mode(self.encoder, self.decoder), torch.no_grad():
            mu, log_var = self.encoder(x)
            z = reparameterize(mu, log_var, generator, deterministic=not stochastic)
            return self.decoder(z * self.mask.to(z))

    def transform_pixels(self, x: torch.Tensor, **kw) -> torch.Tensor:
        return (self.transform(x, **kw) + 1.0) * 0.5

    def save(self, folder: str | Path) -> Path:
        folder = Path(folder)
        folder.mkdir(parents=True, exist_ok=True)
        torch.save(self.encoder.state_dict(), folder / "encoder.pt")
        torch.save(self.decoder.state_dict(), folder / "decoder.pt")
        mask_doc = self.mask_state.to_dict() if self.mask_state else None
        meta = {
            "schema_version": ARTIFACT_SCHEMA,
            "target_model_id": self.target_model_id,
            "mask": [int(b) for b in self.mask.round().to(torch.int64).tolist()],
            "mask_state": mask_doc,
            "input_mean": list(self.input_stats[0]),
            "input_std": list(self.input_stats[1]),
            "decoder": self.decoder.describe(),
            "history": [r.to_dict() for r in self.history],
            "mask_epochs": [m.computed_at_epoch for m in self.mask_history],
        }
        (folder / "artifact.json").write_text(json.dumps(meta, indent=1) + "\n")
        self.manifest.save(folder / "manifest.json")
        return folder

    @classmethod
    def load(cls, folder: str | Path) -> TrainedArtifact:
        folder = Path(folder)
        meta_path = folder / "artifact.json"
        if not meta_path.exists():
            raise CheckpointError(f"{folder} is not an artifact directory (no artifact.json)")
        meta = json.loads(meta_path.read_text())
        if meta.get("schema_version") != ARTIFACT_SCHEMA:
            raise CheckpointError(f"unsupported artifact schema {meta.get('schema_version')}")
        manifest = Manifest.load(folder / "manifest.json")
        cfg = manifest.run_config()
        encoder, decoder = build_networks(cfg)
        try:
            encoder.load_state_dict(torch.load(folder / "encoder.pt", weights_only=True))
            decoder.load_state_dict(torch.load(folder / "decoder.pt", weights_only=True))
        except (RuntimeError, FileNotFoundError) as exc:
            raise CheckpointError(f"cannot load networks from {folder}: {exc}") from None
        mask_state = MaskState.from_dict(meta["mask_state"]) if meta.get("mask_state") else None
        return cls(
            encoder=encoder.eval(),
            decoder=decoder.eval(),
            mask=torch.tensor(np.asarray(meta["mask"], dtype=np.float32)),
            config=cfg,
            manifest=manifest,
            input_stats=(tuple(meta["input_mean"]), tuple(meta["input_std"])),
            mask_state=mask_state,
            history=[EpochRecord(**r) for r in meta.get("history", [])],
        )
