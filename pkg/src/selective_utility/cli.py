"""``selutil`` command line: fetch data, fit a toy zoo, train, transform, evaluate, report.

Errors surface as a single ``error: <Class>: <message>`` line on stderr with
exit status 1; argument problems exit with status 2.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from . import __version__
from .artifact import TrainedArtifact
from .config import RunConfig, load_config
from .data import TOY_SIZES, load_dataset, read_image, read_labels_csv, toy_shapes, write_labels_csv
from .errors import CheckpointError, RunDirectoryError, SelutilError
from .evaluation import (
    IDENTITY,
    ArtifactTransform,
    build_transfer_matrix,
    emit_report,
    evaluate_many,
    heatmap,
    load_matrix_csv,
    matrix_markdown,
    run_ablation,
)
from .training import is_complete, run_training
from .zoo import TOY_ARCHITECTURES, ModelZoo, build_toy_zoo, evaluate_plain

log = logging.getLogger("selutil")

RUN_ROOT_ENV = "SELUTIL_RUN_ROOT"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".webp"}


@contextlib.contextmanager
def run_lock(folder: Path) -> Iterator[None]:
    """Exclusive ownership of a run directory for the lifetime of the command."""
    from filelock import FileLock, Timeout

    folder.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(folder / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise RunDirectoryError(f"{folder} is locked by another selutil process") from None
    try:
        yield
    finally:
        lock.release()


def _run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def _datasets(cfg: RunConfig, root: str | None):
    train = load_dataset(cfg.dataset_id, "train", cfg.input_resolution, root, cfg.skip_corrupt)
    test = load_dataset(cfg.dataset_id, "test", cfg.input_resolution, root, cfg.skip_corrupt)
    return train.subset(cfg.train_limit), test.subset(cfg.test_limit)


def _test_split(art: TrainedArtifact, root: str | None):
    cfg = art.config
    return load_dataset(cfg.dataset_id, "test", cfg.input_resolution, root, cfg.skip_corrupt).subset(cfg.test_limit)


def _classifiers(zoo: ModelZoo, ids: Sequence[str]) -> dict:
    missing = [m for m in ids if m not in zoo]
    if missing:
        raise CheckpointError(f"models not in registry: {', '.join(missing)}; known: {', '.join(zoo.ids())}")
    return {m: zoo.get(m) for m in ids}


def _print(msg: str) -> None:
    print(msg, flush=True)


# --------------------------------------------------------------------------
# commands


def cmd_fetch_data(args) -> int:
    from .data import fetch_data

    root = fetch_data(args.dataset, args.data_root)
    _print(f"{args.dataset} ready under {root}")
    return 0


def cmd_fit_zoo(args) -> int:
    size = args.train_size or TOY_SIZES["train"]
    train = toy_shapes("train", args.resolution, size=size)
    test = toy_shapes("test", args.resolution)
    zoo = build_toy_zoo(args.out, train, args.archs, epochs=args.epochs, seed=args.seed, log_fn=_print)
    for m in args.archs:
        _print(f"{m}: test accuracy {evaluate_plain(zoo.get(m), test):.2f}%")
    _print(f"registry written to {Path(args.out) / 'registry.json'}")
    return 0


def cmd_train(args) -> int:
    if args.resume:
        run_dir = Path(args.resume)
        if is_complete(run_dir):
            _print(f"{run_dir}: already complete")
            return 0
        cfg_path = Path(args.config) if args.config else run_dir / "config.cfg"
        if not cfg_path.exists():
            raise RunDirectoryError(f"{run_dir} has no config.cfg; pass --config")
    else:
        cfg_path = Path(args.config)
        run_dir = Path(args.run_dir) if args.run_dir else _run_root() / cfg_path.stem
        if run_dir.exists() and any(p.name != ".lock" for p in run_dir.iterdir()):
            if not args.force:
                raise RunDirectoryError(f"{run_dir} already exists; run directories are append-only "
                                        "(use --force to replace it or --resume to continue)")
            shutil.rmtree(run_dir)
    cfg = load_config(cfg_path)
    zoo = ModelZoo.load(args.registry)
    target = zoo.get(cfg.target_model_id)
    train, test = _datasets(cfg, args.data_root)
    with run_lock(run_dir):
        art = run_training(cfg, train, target, run_dir=run_dir, resume=bool(args.resume), log_fn=_print)
        res = evaluate_many([target], ArtifactTransform(art), test)[0]
        art.manifest.metrics.update({"test_top1_target": res.top1, "test_samples": float(res.count)})
        if res.top5 is not None:
            art.manifest.metrics["test_top5_target"] = res.top5
        art.manifest.save(run_dir / "manifest.json")
        art.manifest.save(run_dir / "artifact" / "manifest.json")
    _print(f"target {target.model_id} test accuracy {res.top1:.2f}% on {res.count} images")
    _print(f"artifact: {run_dir / 'artifact'}")
    return 0


def _to_png(pixels: torch.Tensor, path: Path) -> None:
    from PIL import Image

    arr = (pixels.clamp(0, 1) * 255.0).round().to(torch.uint8).permute(1, 2, 0).numpy()
    Image.fromarray(np.ascontiguousarray(arr)).save(path, format="PNG", optimize=False)


def cmd_transform(args) -> int:
    from .data import preprocess

    art = TrainedArtifact.load(args.artifact)
    src, out = Path(args.input), Path(args.output)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise RunDirectoryError(f"{out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    names = sorted(p.name for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    skipped, written = [], {}
    res = art.config.input_resolution
    mean, std = art.input_stats
    for i in range(0, len(names), args.batch_size):
        chunk, imgs = [], []
        for name in names[i : i + args.batch_size]:
            try:
                img = read_image(src / name)
            except Exception as exc:  # PIL raises many types for damaged files
                skipped.append(f"{name}\t{type(exc).__name__}: {exc}")
                continue
            imgs.append(preprocess(img[None], res, mean, std)[0])
            chunk.append(name)
        if not chunk:
            continue
        pixels = art.transform_pixels(torch.stack(imgs))
        for name, px in zip(chunk, pixels):
            written[name] = Path(name).stem + ".png"
            _to_png(px, out / written[name])
    if (src / "labels.csv").exists():
        write_labels_csv(out, [(written[n], lab) for n, lab in read_labels_csv(src) if n in written])
    if skipped:
        (out / "skipped.log").write_text("\n".join(skipped) + "\n")
        print(f"warning: skipped {len(skipped)} unreadable file(s); see {out / 'skipped.log'}", file=sys.stderr)
    _print(f"wrote {len(written)} transformed image(s) to {out}")
    return 0


def cmd_eval(args) -> int:
    zoo = ModelZoo.load(args.registry)
    out = Path(args.out) if args.out else None
    if args.image_dir:
        from .data import image_folder

        evaluators = _classifiers(zoo, args.evaluators or zoo.ids())
        first = next(iter(evaluators.values()))
        handle = image_folder(args.image_dir, first.input_resolution, first.num_classes,
                              (0.5,) * 3, (0.5,) * 3, skip_corrupt=True)
        results = evaluate_many(list(evaluators.values()), IDENTITY, handle)
        for m, r in zip(evaluators, results):
            _print(f"{m}: {r.top1:.2f}% top-1 on {r.count} images")
        if out:
            out.mkdir(parents=True, exist_ok=True)
            (out / "image_eval.json").write_text(json.dumps({m: r.top1 for m, r in zip(evaluators, results)},
                                                            indent=1, sort_keys=True) + "\n")
        return 0

    paths = args.matrix or [args.artifact]
    arts, missing = {}, []
    order = []
    for p in paths:
        try:
            art = TrainedArtifact.load(p)
        except (CheckpointError, FileNotFoundError) as exc:
            missing.append(f"{p}: {exc}")
            order.append(Path(p).name)
            arts[Path(p).name] = None
            continue
        arts[art.target_model_id] = art
        order.append(art.target_model_id)
    loaded = [a for a in arts.values() if a is not None]
    if not loaded:
        for m in missing:
            print(f"missing artifact: {m}", file=sys.stderr)
        raise CheckpointError("no loadable artifacts")
    evaluator_ids = args.evaluators or list(dict.fromkeys([a.target_model_id for a in loaded] + zoo.ids()))
    evaluators = _classifiers(zoo, evaluator_ids)
    test = _test_split(loaded[0], args.data_root)
    matrix = build_transfer_matrix(arts, evaluators, test, target_ids=order)
    for t in order:
        st = matrix.row_stats(t)
        if st is None:
            _print(f"{t}: n/a")
            continue
        cells = " ".join(f"{e}={matrix.cell(t, e):.2f}" for e in evaluator_ids)
        ratio = "n/a" if st.ratio is None else f"{st.ratio:.2f}x"
        _print(f"{t}: {cells} max_off={st.max_off:.2f} suppression={ratio}")
    if out:
        emit_report(matrix, out)
        _print(f"report written to {out}")
    if missing:
        for m in missing:
            print(f"missing artifact: {m}", file=sys.stderr)
        return 1
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    zoo = ModelZoo.load(args.registry)
    target = zoo.get(cfg.target_model_id)
    others = _classifiers(zoo, args.unintended or [m for m in zoo.ids() if m != cfg.target_model_id])
    train, test = _datasets(cfg, args.data_root)
    out = Path(args.out)
    if out.exists() and any(p.name != ".lock" for p in out.iterdir()) and not args.force:
        raise RunDirectoryError(f"{out} already exists (use --force)")

    if out.exists():
        shutil.rmtree(out)
    with run_lock(out):
        report = run_ablation(cfg, train, test, target, others, run_root=out, log_fn=_print)
        emit_report(report, out)
    for s in report.stages:
        tail = f" ({s.note})" if s.note else ""
        ta = "n/a" if s.target_acc is None else f"{s.target_acc:.2f}"
        mu = "n/a" if s.mean_unintended is None else f"{s.mean_unintended:.2f}"
        _print(f"{s.label}: target {ta}% mean unintended {mu}%{tail}")
    return 1 if any(s.note for s in report.stages) else 0


def cmd_report(args) -> int:
    src = Path(args.csv)
    matrix = load_matrix_csv(src, args.num_classes)
    out = Path(args.out) if args.out else src.parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text("# Transfer matrix\n\n" + matrix_markdown(matrix))
    heatmap(matrix, out / "heatmap.png")
    _print(f"wrote {out / 'report.md'} and {out / 'heatmap.png'}")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selutil", description="Train, apply and evaluate selective-utility image transforms.")
    p.add_argument("--version", action="version", version=f"selutil {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("--data-root", default=None, help="dataset root (default: $SELUTIL_DATA_ROOT)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fetch-data", help="download a public dataset")
    s.add_argument("dataset", choices=["cifar10", "cifar100", "toy-shapes"])
    s.set_defaults(func=cmd_fetch_data)

    s = sub.add_parser("fit-zoo", help="fit the desk-scale classifier zoo on toy-shapes")
    s.add_argument("--out", required=True, help="folder for checkpoints and registry.json")
    s.add_argument("--archs", nargs="+", default=list(TOY_ARCHITECTURES))
    s.add_argument("--resolution", type=int, default=32)
    s.add_argument("--epochs", type=int, default=6)
    s.add_argument("--train-size", type=int, default=0, help="0 = full split")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_fit_zoo)

    s = sub.add_parser("train", help="train an encoder/mask/decoder artifact")
    s.add_argument("--config", help="run configuration (.cfg)")
    s.add_argument("--registry", help="model registry (default: $SELUTIL_REGISTRY)")
    s.add_argument("--run-dir", help="output run directory (default: $SELUTIL_RUN_ROOT/<config name>)")
    s.add_argument("--force", action="store_true", help="replace an existing run directory")
    s.add_argument("--resume", metavar="RUN_DIR", help="continue an interrupted run")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("transform", help="write transformed copies of an image folder")
    s.add_argument("--artifact", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--batch-size", type=int, default=256)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_transform)

    s = sub.add_parser("eval", help="accuracy of evaluators on transformed test images")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--artifact", help="single artifact directory")
    g.add_argument("--matrix", nargs="+", metavar="ARTIFACT", help="artifacts forming the matrix rows")
    g.add_argument("--image-dir", help="folder of images with labels.csv, scored as-is")
    s.add_argument("--evaluators", nargs="+", help="model ids (default: all registered)")
    s.add_argument("--registry")
    s.add_argument("--out", help="folder for transfer_matrix.csv, report.md, heatmap.png")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="no-mask / KL-only / integrated ablation")
    s.add_argument("--config", required=True)
    s.add_argument("--registry")
    s.add_argument("--unintended", nargs="+", help="unintended model ids (default: all others)")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", help="render report.md and heatmap.png from a transfer_matrix.csv")
    s.add_argument("--csv", required=True)
    s.add_argument("--num-classes", type=int, required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train":
        if not args.config and not args.resume:
            parser.error("train needs --config (or --resume RUN_DIR)")
        if args.config and not Path(args.config).exists():
            parser.error(f"config file {args.config} does not exist")
    if args.command == "ablate" and not Path(args.config).exists():
        parser.error(f"config file {args.config} does not exist")
    try:
        return args.func(args)
    except SelutilError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("error: Interrupted: stopped by user", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
