"""Accuracy evaluation, transfer matrices, the three-stage ablation, and report files.

Rows of a transfer matrix are the targets an artifact was trained against and
columns are the classifiers scoring the transformed test split. Everything is
evaluated over the whole split in deterministic transform mode unless a caller
asks for stochastic sampling.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .artifact import TrainedArtifact
from .config import RunConfig, derive_seed
from .data import DatasetHandle, batches
from .errors import ContractError, SelutilError
from .zoo import FrozenClassifier, parameter_hash

log = logging.getLogger(__name__)

STAGE_LABELS = {
    "none": "No masking",
    "kl-only": "KL-only masking",
    "integrated": "Integrated masking",
}


# --------------------------------------------------------------------------
# transforms


class IdentityTransform:
    """Pass test images through untouched (baseline accuracy)."""

    name = "identity"
    output_resolution: int | None = None

    def pixels(self, x: torch.Tensor, handle: DatasetHandle, generator=None) -> torch.Tensor:
        return handle.to_pixels(x)

    def check(self, handle: DatasetHandle) -> int:
        return handle.resolution

    def parameter_hash(self) -> str:
        return ""


IDENTITY = IdentityTransform()


class ArtifactTransform:
    """Wrap a trained artifact so it maps standardized test batches to [0, 1] pixels."""

    def __init__(self, artifact: TrainedArtifact, stochastic: bool = False):
        self.artifact = artifact
        self.stochastic = stochastic
        self.name = artifact.target_model_id
        self._mean = torch.tensor(artifact.input_stats[0]).view(1, -1, 1, 1)
        self._std = torch.tensor(artifact.input_stats[1]).view(1, -1, 1, 1)

    @property
    def output_resolution(self) -> int:
        return self.artifact.output_resolution

    def check(self, handle: DatasetHandle) -> int:
        want = self.artifact.config.input_resolution
        if handle.resolution != want:
            raise ContractError(f"artifact for {self.name} reads {want}px images, test split is {handle.resolution}px")
        return self.output_resolution

    def pixels(self, x: torch.Tensor, handle: DatasetHandle, generator=None) -> torch.Tensor:
        # the test split may be standardized with other stats than the artifact saw in training
        restd = (handle.to_pixels(x) - self._mean.to(x)) / self._std.to(x)
        return self.artifact.transform_pixels(restd, generator=generator, stochastic=self.stochastic)

    def parameter_hash(self) -> str:
        return parameter_hash(self.artifact.encoder) + parameter_hash(self.artifact.decoder)


def as_transform(t) -> IdentityTransform | ArtifactTransform:
    if t is None or t == "identity":
        return IDENTITY
    if isinstance(t, TrainedArtifact):
        return ArtifactTransform(t)
    return t


# --------------------------------------------------------------------------
# accuracy


@dataclass
class EvalResult:
    top1: float
    top5: float | None
    count: int


def evaluate_many(evaluators: Sequence[FrozenClassifier], transform, testset: DatasetHandle,
                  batch_size: int = 500, samples: int = 1, seed: int = 0) -> list[EvalResult]:
    """Score several classifiers on one pass of transformed images."""
    if testset.size == 0:
        raise ContractError("empty test split")
    out_res = transform.check(testset)
    for clf in evaluators:
        if clf.input_resolution != out_res:
            raise ContractError(f"{clf.model_id} takes {clf.input_resolution}px inputs, "
                                f"transform {transform.name} produces {out_res}px")
    hashes = [clf.parameter_hash() for clf in evaluators], transform.parameter_hash()
    draws = max(1, samples) if getattr(transform, "stochastic", False) else 1
    top1 = np.zeros((len(evaluators), draws))
    top5 = np.zeros((len(evaluators), draws))
    seen = 0
    for k in range(draws):
        gen = torch.Generator().manual_seed(derive_seed(seed, "eval-noise", k))
        seen = 0
        for x, y in batches(testset, batch_size, 0, 0, shuffle=False):
            pixels = transform.pixels(x, testset, generator=gen)
            seen += len(y)
            for i, clf in enumerate(evaluators):
                logits = clf.predict(clf.normalize(pixels))
                top1[i, k] += int((logits.argmax(1) == y).sum())
                if clf.num_classes >= 10:
                    top = logits.topk(5, dim=1).indices
                    top5[i, k] += int((top == y[:, None]).any(1).sum())
    if seen != testset.size:
        raise ContractError(f"evaluated {seen} samples, split has {testset.size}")
    if ([clf.parameter_hash() for clf in evaluators], transform.parameter_hash()) != hashes:
        raise SelutilError("network parameters changed during evaluation")
    results = []
    for i, clf in enumerate(evaluators):
        t5 = float(100.0 * top5[i].mean() / seen) if clf.num_classes >= 10 else None
        results.append(EvalResult(float(100.0 * top1[i].mean() / seen), t5, seen))
    return results


def evaluate(model: FrozenClassifier, transform, testset: DatasetHandle, batch_size: int = 500,
             samples: int = 1, seed: int = 0) -> EvalResult:
    return evaluate_many([model], as_transform(transform), testset, batch_size, samples, seed)[0]


def evaluate_accuracy(model: FrozenClassifier, transform, testset: DatasetHandle, **kw) -> float:
    """Top-1 accuracy (percent) of ``model`` on ``transform(testset)``."""
    return evaluate(model, transform, testset, **kw).top1


def chance_level(num_classes: int) -> float:
    return 100.0 / num_classes


def binomial_band(num_classes: int, n: int, sigmas: float = 3.0) -> tuple[float, float]:
    p = 1.0 / num_classes
    half = sigmas * 100.0 * math.sqrt(p * (1 - p) / n)
    return 100.0 * p - half, 100.0 * p + half


# --------------------------------------------------------------------------
# transfer matrix


@dataclass
class RowStats:
    diag: float | None
    max_off: float
    mean_off: float
    ratio: float | None


@dataclass
class TransferMatrix:
    target_ids: list[str]
    evaluator_ids: list[str]
    acc: list[list[float] | None]  # None marks a skipped row
    num_classes: int
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.acc) != len(self.target_ids):
            raise ContractError("one accuracy row per target id")
        for row in self.acc:
            if row is not None:
                if len(row) != len(self.evaluator_ids):
                    raise ContractError("one accuracy column per evaluator id")
                if any(not (0.0 <= v <= 100.0) for v in row):
                    raise ContractError("accuracies must lie in [0, 100]")

    @property
    def chance(self) -> float:
        return chance_level(self.num_classes)

    @property
    def skipped(self) -> list[str]:
        return [t for t, row in zip(self.target_ids, self.acc) if row is None]

    def cell(self, target: str, evaluator: str) -> float | None:
        row = self.acc[self.target_ids.index(target)]
        return None if row is None else row[self.evaluator_ids.index(evaluator)]

    def row_stats(self, target: str) -> RowStats | None:
        row = self.acc[self.target_ids.index(target)]
        if row is None:
            return None
        off = [v for e, v in zip(self.evaluator_ids, row) if e != target]
        diag = row[self.evaluator_ids.index(target)] if target in self.evaluator_ids else None
        max_off = max(off) if off else 0.0
        mean_off = float(np.mean(off)) if off else 0.0
        ratio = None
        if diag is not None and off:
            ratio = diag / max(max_off, self.chance / 10.0)
        return RowStats(diag, max_off, mean_off, ratio)

    def column_stats(self, evaluator: str) -> RowStats | None:
        """Same statistics down a column: how well ``evaluator`` reads other targets' outputs."""
        if evaluator not in self.target_ids or self.acc[self.target_ids.index(evaluator)] is None:
            return None
        j = self.evaluator_ids.index(evaluator)
        off = [row[j] for t, row in zip(self.target_ids, self.acc) if row is not None and t != evaluator]
        diag = self.acc[self.target_ids.index(evaluator)][j]
        max_off = max(off) if off else 0.0
        ratio = diag / max(max_off, self.chance / 10.0) if off else None
        return RowStats(diag, max_off, float(np.mean(off)) if off else 0.0, ratio)

    def off_diagonal(self) -> list[float]:
        vals = []
        for t, row in zip(self.target_ids, self.acc):
            if row is not None:
                vals += [v for e, v in zip(self.evaluator_ids, row) if e != t]
        return vals

    def to_dict(self) -> dict:
        return {"target_ids": self.target_ids, "evaluator_ids": self.evaluator_ids,
                "acc": self.acc, "num_classes": self.num_classes, "notes": self.notes}

    @classmethod
    def from_dict(cls, d: dict) -> TransferMatrix:
        return cls(list(d["target_ids"]), list(d["evaluator_ids"]), d["acc"], int(d["num_classes"]),
                   d.get("notes", {}))


def build_transfer_matrix(artifacts: Mapping[str, TrainedArtifact | None], evaluators: Mapping[str, FrozenClassifier],
                          testset: DatasetHandle, batch_size: int = 500,
                          target_ids: Sequence[str] | None = None) -> TransferMatrix:
    """Rows follow ``target_ids`` (default: artifact keys); a missing artifact leaves a skipped row."""
    target_ids = list(target_ids if target_ids is not None else artifacts)
    evaluator_ids = list(evaluators)
    clfs = [evaluators[e] for e in evaluator_ids]
    rows: list[list[float] | None] = []
    for t in target_ids:
        art = artifacts.get(t)
        if art is None:
            log.warning("no artifact for target %s; row skipped", t)
            rows.append(None)
            continue
        if art.target_model_id != t:
            raise ContractError(f"artifact listed under {t} was trained for {art.target_model_id}")
        rows.append([r.top1 for r in evaluate_many(clfs, ArtifactTransform(art), testset, batch_size)])
    return TransferMatrix(target_ids, evaluator_ids, rows, testset.num_classes)


# --------------------------------------------------------------------------
# ablation


@dataclass
class AblationStage:
    stage: str
    label: str
    target_acc: float | None = None
    mean_unintended: float | None = None
    unintended: dict[str, float] = field(default_factory=dict)
    kept_dims: int | None = None
    note: str = ""


@dataclass
class AblationReport:
    target_id: str
    num_classes: int
    stages: list[AblationStage]

    @property
    def chance(self) -> float:
        return chance_level(self.num_classes)

    def stage(self, name: str) -> AblationStage:
        for s in self.stages:
            if s.stage == name:
                return s
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"target_id": self.target_id, "num_classes": self.num_classes,
                "stages": [dict(s.__dict__) for s in self.stages]}

    @classmethod
    def from_dict(cls, d: dict) -> AblationReport:
        return cls(d["target_id"], int(d["num_classes"]), [AblationStage(**s) for s in d["stages"]])


def ablation_configs(base: RunConfig) -> dict[str, RunConfig]:
    """The three stages share seed, epoch budget and threshold; only masking differs."""
    return {
        "none": base.replace(mask_mode="none"),
        "kl-only": base.replace(mask_mode="dynamic", gamma=1.0),
        "integrated": base.replace(mask_mode="dynamic"),
    }


def run_ablation(base: RunConfig, train: DatasetHandle, test: DatasetHandle, target: FrozenClassifier,
                 unintended: Mapping[str, FrozenClassifier],
                 trainer: Callable[..., TrainedArtifact] | None = None,
                 artifacts: Mapping[str, TrainedArtifact] | None = None,
                 batch_size: int = 500, run_root: str | Path | None = None,
                 log_fn: Callable[[str], None] | None = None) -> AblationReport:
    """Train (or reuse) one artifact per stage and score target plus unintended models.

    With the default trainer and ``run_root`` set, stage ``s`` keeps its run
    directory at ``run_root/s``.
    """
    if trainer is None:
        from .training import run_training

        def trainer(cfg, data, tgt, stage=None):
            run_dir = Path(run_root) / stage if run_root is not None and stage else None
            return run_training(cfg, data, tgt, run_dir=run_dir, log_fn=log_fn)
    else:
        custom = trainer
        trainer = lambda cfg, data, tgt, stage=None: custom(cfg, data, tgt)  # noqa: E731
    artifacts = dict(artifacts or {})
    others = {k: v for k, v in unintended.items() if k != target.model_id}
    stages = []
    for name, cfg in ablation_configs(base).items():
        stage = AblationStage(name, STAGE_LABELS[name])
        try:
            art = artifacts.get(name)
            if art is None:
                if log_fn:
                    log_fn(f"== stage {name}")
                art = trainer(cfg, train, target, stage=name)
                artifacts[name] = art
            clfs = [target] + list(others.values())
            res = evaluate_many(clfs, ArtifactTransform(art), test, batch_size)
            stage.target_acc = res[0].top1
            stage.unintended = {k: r.top1 for k, r in zip(others, res[1:])}
            stage.mean_unintended = float(np.mean(list(stage.unintended.values()))) if others else None
            stage.kept_dims = int(art.mask.sum())
        except SelutilError as exc:
            stage.note = f"failed: {type(exc).__name__}: {exc}"
            log.error("ablation stage %s failed: %s", name, exc)
        stages.append(stage)
    return AblationReport(target.model_id, test.num_classes, stages)


# --------------------------------------------------------------------------
# reports


def _fmt(v: float | None) -> str:
    return "n/a" if v is None else f"{v:.2f}"


def matrix_csv(m: TransferMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target"] + m.evaluator_ids)
    for t, row in zip(m.target_ids, m.acc):
        w.writerow([t] + (["n/a"] * len(m.evaluator_ids) if row is None else [_fmt(v) for v in row]))
    return buf.getvalue()


def matrix_markdown(m: TransferMatrix) -> str:
    head = ["Target \\ Evaluator"] + m.evaluator_ids + ["Max off-diag", "Mean off-diag", "Suppression"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for t, row in zip(m.target_ids, m.acc):
        if row is None:
            lines.append("| " + " | ".join([t] + ["n/a"] * (len(head) - 1)) + " |")
            continue
        cells = [f"**{_fmt(v)}**" if e == t else _fmt(v) for e, v in zip(m.evaluator_ids, row)]
        st = m.row_stats(t)
        ratio = "n/a" if st.ratio is None else f"{st.ratio:.2f}x"
        lines.append("| " + " | ".join([t] + cells + [_fmt(st.max_off), _fmt(st.mean_off), ratio]) + " |")
    off = m.off_diagonal()
    lines += ["", f"Chance level: {m.chance:.2f}%. Mean off-diagonal: {_fmt(float(np.mean(off)) if off else None)}%. "
                  f"Suppression ratio = diagonal / max(max off-diagonal, {m.chance / 10:.2f})."]
    if m.skipped:
        lines.append(f"Skipped (no artifact): {', '.join(m.skipped)}.")
    return "\n".join(lines) + "\n"


def ablation_csv(r: AblationReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["configuration", "target_acc", "mean_unintended", "kept_dims", "note"])
    for s in r.stages:
        w.writerow([s.label, _fmt(s.target_acc), _fmt(s.mean_unintended),
                    "" if s.kept_dims is None else s.kept_dims, s.note])
    return buf.getvalue()


def ablation_markdown(r: AblationReport) -> str:
    lines = [f"Target: {r.target_id} (chance {r.chance:.2f}%)", "",
             "| Configuration | Target Acc. (%) | Mean Unintended (%) |", "|---|---|---|"]
    for s in r.stages:
        tail = f" ({s.note})" if s.note else ""
        lines.append(f"| {s.label}{tail} | {_fmt(s.target_acc)} | {_fmt(s.mean_unintended)} |")
    return "\n".join(lines) + "\n"


def heatmap(m: TransferMatrix, path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    grid = np.array([[np.nan] * len(m.evaluator_ids) if row is None else row for row in m.acc], dtype=float)
    fig, ax = plt.subplots(figsize=(1.2 * len(m.evaluator_ids) + 2.5, 1.0 * len(m.target_ids) + 1.5), dpi=100)
    im = ax.imshow(grid, cmap="viridis", vmin=0.0, vmax=100.0)
    ax.set_xticks(range(len(m.evaluator_ids)), m.evaluator_ids, rotation=30, ha="right")
    ax.set_yticks(range(len(m.target_ids)), m.target_ids)
    ax.set_xlabel("evaluator")
    ax.set_ylabel("target")
    for i, t in enumerate(m.target_ids):
        for j, e in enumerate(m.evaluator_ids):
            v = grid[i, j]
            text = "n/a" if np.isnan(v) else f"{v:.2f}"
            ax.text(j, i, text, ha="center", va="center", fontsize=9,
                    color="black" if not np.isnan(v) and v > 60 else "white",
                    fontweight="bold" if t == e else "normal")
            if t == e:
                ax.add_patch(plt.Rectangle((j - 0.5, i - 0.5), 1, 1, fill=False, edgecolor="red", linewidth=2))
    fig.colorbar(im, ax=ax, label="top-1 accuracy (%)")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def emit_report(result: TransferMatrix | AblationReport, folder: str | Path) -> list[Path]:
    """Write CSV, markdown and (for matrices) a heatmap into ``folder``."""
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    written = []
    if isinstance(result, TransferMatrix):
        (folder / "transfer_matrix.csv").write_text(matrix_csv(result))
        (folder / "transfer_matrix.json").write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True) + "\n")
        (folder / "report.md").write_text("# Transfer matrix\n\n" + matrix_markdown(result))
        written += [folder / "transfer_matrix.csv", folder / "transfer_matrix.json", folder / "report.md",
                    heatmap(result, folder / "heatmap.png")]
    else:
        (folder / "ablation.csv").write_text(ablation_csv(result))
        (folder / "ablation.json").write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True) + "\n")
        (folder / "ablation.md").write_text("# Ablation\n\n" + ablation_markdown(result))
        written += [folder / "ablation.csv", folder / "ablation.json", folder / "ablation.md"]
    return written


def load_matrix_csv(path: str | Path, num_classes: int) -> TransferMatrix:
    """Read back a ``transfer_matrix.csv`` (2-decimal values; ``n/a`` rows become skipped)."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "target":
        raise ContractError(f"{path} is not a transfer-matrix CSV")
    evaluators = rows[0][1:]
    targets, acc = [], []
    for r in rows[1:]:
        targets.append(r[0])
        acc.append(None if all(v == "n/a" for v in r[1:]) else [float(v) for v in r[1:]])
    return TransferMatrix(targets, evaluators, acc, num_classes)
