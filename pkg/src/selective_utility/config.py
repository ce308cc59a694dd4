"""Run configuration: schema, validation, persistence and run manifests.

Config files are INI documents with a single ``[run]`` section::

    [run]
    schema_version = 1
    lambda_kl = 0.01
    gamma = 0.5
    ...

Keys listed in ``REQUIRED_KEYS`` must be present. Everything else falls back
to the defaults declared on :class:`RunConfig`.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError

SCHEMA_VERSION = 1
MASK_MODES = ("dynamic", "static", "none")
ENCODER_BACKBONES = ("small-cnn", "resnet18")

# The schedule triple is deliberately required: each experiment in the
# recipes directory states its own warmup/masking split.
REQUIRED_KEYS = (
    "lambda_kl",
    "gamma",
    "threshold",
    "warm_epochs",
    "mask_epochs",
    "mask_update_freq",
    "mask_mode",
    "target_model_id",
    "dataset_id",
)


@dataclass(frozen=True)
class RunConfig:
    lambda_kl: float
    gamma: float
    threshold: float
    warm_epochs: int
    mask_epochs: int
    mask_update_freq: int
    mask_mode: str
    target_model_id: str
    dataset_id: str

    schema_version: int = SCHEMA_VERSION
    latent_dim: int = 512
    batch_size: int = 64
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    input_resolution: int = 224
    seed: int = 0

    # recompute at epoch warm_epochs + 1 in addition to the literal schedule
    mask_at_phase_start: bool = True
    grad_clip: float = 0.0
    # number of training samples used for mask scores; 0 = whole training set
    score_subsample: int = 0
    score_batch_size: int = 256

    encoder_backbone: str = "small-cnn"
    encoder_width: int = 64
    encoder_blocks: int = 3
    decoder_base: int = 14
    decoder_proj_channels: int = 3
    decoder_channels: int = 64

    train_limit: int = 0
    test_limit: int = 0
    skip_corrupt: bool = False
    checkpoint_keep: int = 3
    # k > 0 averages evaluation accuracy over k stochastic encodings
    eval_samples: int = 0
    deterministic: bool = True

    def __post_init__(self) -> None:
        validate(self)

    @property
    def total_epochs(self) -> int:
        return self.warm_epochs + self.mask_epochs

    @property
    def decoder_blocks(self) -> int:
        ratio = self.input_resolution // self.decoder_base
        return max(ratio.bit_length() - 1, 0)

    def replace(self, **changes: Any) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _check(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ConfigError(key, message)


def validate(cfg: RunConfig) -> None:
    for name, f in _FIELDS.items():
        value = getattr(cfg, name)
        expected = _field_type(f)
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            object.__setattr__(cfg, name, float(value))
            continue
        if expected is int and isinstance(value, bool):
            raise ConfigError(name, f"expected int, got {value!r}")
        _check(isinstance(value, expected), name, f"expected {expected.__name__}, got {value!r}")

    _check(cfg.schema_version == SCHEMA_VERSION, "schema_version",
           f"unsupported schema version {cfg.schema_version} (expected {SCHEMA_VERSION})")
    _check(cfg.latent_dim >= 1, "latent_dim", "invariant d >= 1 violated")
    _check(cfg.lambda_kl >= 0, "lambda_kl", "invariant lambda_kl >= 0 violated")
    _check(0.0 <= cfg.gamma <= 1.0, "gamma", "invariant 0 <= gamma <= 1 violated")
    _check(0.0 <= cfg.threshold <= 1.0, "threshold", "invariant 0 <= T <= 1 violated")
    _check(cfg.warm_epochs >= 0, "warm_epochs", "must be >= 0")
    _check(cfg.mask_epochs >= 0, "mask_epochs", "must be >= 0")
    _check(cfg.mask_update_freq >= 1, "mask_update_freq", "invariant freq >= 1 violated")
    _check(cfg.mask_mode in MASK_MODES, "mask_mode", f"must be one of {MASK_MODES}")
    _check(cfg.batch_size >= 1, "batch_size", "must be positive")
    _check(cfg.learning_rate > 0, "learning_rate", "must be positive")
    _check(cfg.weight_decay >= 0, "weight_decay", "must be >= 0")
    _check(cfg.input_resolution >= 1, "input_resolution", "must be positive")
    _check(bool(cfg.target_model_id), "target_model_id", "must be non-empty")
    _check(bool(cfg.dataset_id), "dataset_id", "must be non-empty")
    _check(cfg.grad_clip >= 0, "grad_clip", "must be >= 0 (0 disables clipping)")
    _check(cfg.score_subsample >= 0, "score_subsample", "must be >= 0")
    _check(cfg.score_batch_size >= 1, "score_batch_size", "must be positive")
    _check(cfg.encoder_backbone in ENCODER_BACKBONES, "encoder_backbone",
           f"must be one of {ENCODER_BACKBONES}")
    _check(cfg.encoder_width >= 4, "encoder_width", "must be >= 4")
    _check(cfg.encoder_blocks >= 1, "encoder_blocks", "must be >= 1")
    _check(cfg.decoder_base >= 1, "decoder_base", "must be positive")
    _check(cfg.decoder_proj_channels >= 1, "decoder_proj_channels", "must be positive")
    _check(cfg.decoder_channels >= 1, "decoder_channels", "must be positive")
    ratio, rem = divmod(cfg.input_resolution, cfg.decoder_base)
    _check(rem == 0 and ratio >= 2 and ratio & (ratio - 1) == 0, "decoder_base",
           f"decoder_base * 2**blocks (blocks >= 1) must equal input_resolution={cfg.input_resolution}")
    _check(cfg.train_limit >= 0, "train_limit", "must be >= 0")
    _check(cfg.test_limit >= 0, "test_limit", "must be >= 0")
    _check(cfg.checkpoint_keep >= 1, "checkpoint_keep", "must be >= 1")
    _check(cfg.eval_samples >= 0, "eval_samples", "must be >= 0")


def _field_type(f: dataclasses.Field) -> type:
    return {"float": float, "int": int, "str": str, "bool": bool}[str(f.type)]


def _parse_value(key: str, raw: str) -> Any:
    kind = _field_type(_FIELDS[key])
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind.__name__}") from None


def config_from_mapping(values: dict[str, Any]) -> RunConfig:
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    missing = [k for k in REQUIRED_KEYS if k not in values]
    if missing:
        raise ConfigError(missing[0], "required key missing")
    parsed = {k: _parse_value(k, v) if isinstance(v, str) and _field_type(_FIELDS[k]) is not str else v
              for k, v in values.items()}
    return RunConfig(**parsed)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        with path.open() as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError("<file>", f"parse failure in {path}: {exc}") from None
    extra = [s for s in parser.sections() if s != "run"]
    if extra:
        raise ConfigError(extra[0], "unknown section (only [run] is allowed)")
    if not parser.has_section("run"):
        raise ConfigError("[run]", f"missing [run] section in {path}")
    return config_from_mapping(dict(parser.items("run")))


def save_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    lines = ["[run]"]
    for key, value in cfg.to_dict().items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    path.write_text("\n".join(lines) + "\n")
    return path


def config_hash(cfg: RunConfig) -> str:
    payload = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def derive_seed(seed: int, stream: str, *extra: int) -> int:
    """Independent 63-bit seed for a named sub-stream (init, shuffle, noise...)."""
    key = [seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF, zlib.crc32(stream.encode()), *extra]
    state = np.random.SeedSequence(key).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


@dataclass
class Manifest:
    config_hash: str
    seed: int
    code_version: str
    target_model_id: str
    dataset_id: str
    config: dict[str, Any]
    created_at: str
    notes: dict[str, Any] = field(default_factory=dict)
    metrics: dict[str, float] = field(default_factory=dict)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> Manifest:
        return cls(**json.loads(Path(path).read_text()))

    def run_config(self) -> RunConfig:
        return RunConfig(**self.config)


def run_manifest(cfg: RunConfig, code_version: str, **notes: Any) -> Manifest:
    return Manifest(
        config_hash=config_hash(cfg),
        seed=cfg.seed,
        code_version=code_version,
        target_model_id=cfg.target_model_id,
        dataset_id=cfg.dataset_id,
        config=cfg.to_dict(),
        created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        notes=dict(notes),
    )
