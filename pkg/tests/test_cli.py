import csv
import json
from pathlib import Path

import pytest

from selective_utility.artifact import TrainedArtifact
from selective_utility.cli import main, run_lock
from selective_utility.data import export_images, load_dataset
from selective_utility.errors import RunDirectoryError
from selective_utility.evaluation import evaluate_accuracy
from selective_utility.zoo import ModelZoo

CFG = """\
[run]
lambda_kl = 0.01
gamma = 0.5
threshold = 0.3
warm_epochs = 2
mask_epochs = 2
mask_update_freq = 1
mask_mode = dynamic
target_model_id = {target}
dataset_id = toy-shapes
latent_dim = 16
input_resolution = 16
decoder_base = 4
batch_size = 32
learning_rate = 0.003
encoder_width = 32
encoder_blocks = 2
decoder_channels = 32
train_limit = 2048
test_limit = 300
"""


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["fit-zoo", "--out", str(root / "zoo"), "--resolution", "16", "--train-size", "2048",
                 "--epochs", "6"]) == 0
    for t in ("toy-mlp", "toy-cnn-b"):
        (root / f"{t}.cfg").write_text(CFG.format(target=t))
        assert main(["train", "--config", str(root / f"{t}.cfg"), "--registry", str(root / "zoo"),
                     "--run-dir", str(root / "runs" / t)]) == 0
    return root


def reg(ws):
    return ["--registry", str(ws / "zoo")]


def test_missing_config_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--config", str(tmp_path / "nope.cfg")])
    assert exc.value.code == 2


def test_train_outputs(ws, capsys):
    run = ws / "runs" / "toy-mlp"
    for name in ("manifest.json", "config.cfg", "losses.csv", "artifact/artifact.json", "masks", "checkpoints"):
        assert (run / name).exists(), name
    # one progress line per epoch
    (ws / "again.cfg").write_text(CFG.format(target="toy-mlp").replace("test_limit = 300", "test_limit = 100"))
    assert main(["train", "--config", str(ws / "again.cfg"), *reg(ws), "--run-dir", str(ws / "runs" / "again")]) == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("epoch ")]
    assert [ln.split()[1] for ln in lines] == ["1/4", "2/4", "3/4", "4/4"]


def test_run_dirs_are_append_only(ws, capsys):
    code = main(["train", "--config", str(ws / "toy-mlp.cfg"), *reg(ws), "--run-dir", str(ws / "runs" / "toy-mlp")])
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: RunDirectoryError:")


def test_resume_finished_run_is_noop(ws, capsys):
    run = ws / "runs" / "toy-mlp"
    before = {p: p.stat().st_mtime_ns for p in run.rglob("*") if p.is_file()}
    assert main(["train", "--resume", str(run), *reg(ws)]) == 0
    assert "already complete" in capsys.readouterr().out
    assert before == {p: p.stat().st_mtime_ns for p in run.rglob("*") if p.is_file()}


def test_error_line_for_unknown_model(ws, capsys):
    (ws / "bad.cfg").write_text(CFG.format(target="no-such-model"))
    assert main(["train", "--config", str(ws / "bad.cfg"), *reg(ws), "--run-dir", str(ws / "runs" / "bad")]) == 1
    assert capsys.readouterr().err.startswith("error: CheckpointError:")


def test_reload_reproduces_manifest_metrics(ws):
    art = TrainedArtifact.load(ws / "runs" / "toy-mlp" / "artifact")
    recorded = art.manifest.metrics["test_top1_target"]
    test = load_dataset("toy-shapes", "test", 16).subset(300)
    clf = ModelZoo.load(ws / "zoo").get("toy-mlp")
    assert abs(evaluate_accuracy(clf, art, test) - recorded) <= 0.01
    assert recorded > 20.0


def test_run_lock_is_exclusive(tmp_path):
    with run_lock(tmp_path):
        with pytest.raises(RunDirectoryError):
            with run_lock(tmp_path):
                pass


@pytest.fixture(scope="module")
def exported(ws):
    test = load_dataset("toy-shapes", "test", 16).subset(300)
    return export_images(test, ws / "test_images")


def test_transform_names_determinism_and_corrupt(ws, exported, tmp_path):
    small = tmp_path / "in"
    small.mkdir()
    names = sorted(p.name for p in exported.glob("*.png"))[:10]
    for n in names:
        (small / n).write_bytes((exported / n).read_bytes())
    art = str(ws / "runs" / "toy-mlp" / "artifact")
    assert main(["transform", "--artifact", art, "--input", str(small), "--output", str(tmp_path / "a")]) == 0
    assert sorted(p.name for p in (tmp_path / "a").glob("*.png")) == names
    assert main(["transform", "--artifact", art, "--input", str(small), "--output", str(tmp_path / "b")]) == 0
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()

    (small / "zz_broken.png").write_bytes(b"not a png")
    assert main(["transform", "--artifact", art, "--input", str(small), "--output", str(tmp_path / "c")]) == 0
    assert len(list((tmp_path / "c").glob("*.png"))) == 10
    assert "zz_broken.png" in (tmp_path / "c" / "skipped.log").read_text()


def test_transform_then_eval_matches_in_memory(ws, exported, capsys):
    art_dir = ws / "runs" / "toy-mlp" / "artifact"
    out = ws / "transformed"
    assert main(["transform", "--artifact", str(art_dir), "--input", str(exported), "--output", str(out)]) == 0
    capsys.readouterr()
    assert main(["eval", "--image-dir", str(out), "--evaluators", "toy-mlp", *reg(ws)]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    from_files = float(line.split()[1].rstrip("%"))
    in_memory = TrainedArtifact.load(art_dir).manifest.metrics["test_top1_target"]
    assert abs(from_files - in_memory) <= 1.0


def test_eval_matrix_two_by_three(ws):
    out = ws / "matrix"
    arts = [str(ws / "runs" / t / "artifact") for t in ("toy-mlp", "toy-cnn-b")]
    assert main(["eval", "--matrix", *arts, "--evaluators", "toy-mlp", "toy-cnn-b", "toy-cnn-a",
                 *reg(ws), "--out", str(out)]) == 0
    with (out / "transfer_matrix.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["target", "toy-mlp", "toy-cnn-b", "toy-cnn-a"]
    assert [r[0] for r in rows[1:]] == ["toy-mlp", "toy-cnn-b"]
    assert all(len(r) == 4 for r in rows)
    assert (out / "heatmap.png").stat().st_size > 0


def test_eval_missing_artifact_enumerated(ws, capsys):
    arts = [str(ws / "runs" / "toy-mlp" / "artifact"), str(ws / "runs" / "ghost")]
    code = main(["eval", "--matrix", *arts, *reg(ws), "--out", str(ws / "partial")])
    assert code != 0
    assert "missing artifact:" in capsys.readouterr().err and "ghost" in (ws / "partial" / "report.md").read_text()


def test_report_from_csv_only(ws, tmp_path):
    src = tmp_path / "m"
    src.mkdir()
    (src / "transfer_matrix.csv").write_text("target,a,b\na,90.00,5.00\nb,4.00,80.00\n")
    before = (src / "transfer_matrix.csv").read_bytes()
    assert main(["report", "--csv", str(src / "transfer_matrix.csv"), "--num-classes", "10"]) == 0
    assert (src / "report.md").exists() and (src / "heatmap.png").exists()
    assert (src / "transfer_matrix.csv").read_bytes() == before


def test_ablate_writes_three_rows(ws):
    cfg = ws / "abl.cfg"
    cfg.write_text(CFG.format(target="toy-mlp").replace("train_limit = 2048", "train_limit = 512")
                   .replace("warm_epochs = 2", "warm_epochs = 1").replace("mask_epochs = 2", "mask_epochs = 1"))
    out = ws / "ablation"
    assert main(["ablate", "--config", str(cfg), *reg(ws), "--out", str(out)]) == 0
    with (out / "ablation.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["configuration"] for r in rows] == ["No masking", "KL-only masking", "Integrated masking"]
    assert all(0 <= float(r["target_acc"]) <= 100 for r in rows)
    assert sorted(p.name for p in out.iterdir() if p.is_dir()) == ["integrated", "kl-only", "none"]
    doc = json.loads((out / "ablation.json").read_text())
    assert doc["target_id"] == "toy-mlp"
