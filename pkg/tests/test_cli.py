import csv
import json

import numpy as np
import pytest

from aicsd import losses
from aicsd.cli import main, summarize_runs
from aicsd.trainer import RunLog

TINY = """
[data]
source = directory
num_classes = 3
[teacher]
width = 8
depth = 2
[student]
width = 4
depth = 1
[train]
epochs = 2
batch_size = 4
lr = 0.05
lambda = 0.5
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "train"), "--n", "8", "--classes", "3", "--size", "16", "--seed", "1"]) == 0
    assert main(["gen-data", "--out", str(root / "val"), "--n", "4", "--classes", "3", "--size", "16", "--seed", "2"]) == 0
    cfg = root / "tiny.ini"
    dirs = f"num_classes = 3\ntrain_dir = {root / 'train'}\nval_dir = {root / 'val'}"
    cfg.write_text(TINY.replace("num_classes = 3", dirs))
    rc = main(["train", "--config", str(cfg), "--arch", "teacher", "--method", "none", "--output-dir", str(root / "teacher")])
    assert rc == 0
    return root, cfg


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestGenData:
    def test_writes_pairs_and_manifest(self, tmp_path):
        out = tmp_path / "d"
        assert main(["gen-data", "--out", str(out), "--n", "10", "--classes", "4", "--size", "16"]) == 0
        assert len(list((out / "images").glob("*.png"))) == 10
        assert len(list((out / "masks").glob("*.png"))) == 10
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["n"] == 10 and manifest["num_classes"] == 4 and len(manifest["files"]) == 20

    def test_rerun_is_byte_identical(self, tmp_path):
        args = ["--n", "5", "--classes", "3", "--size", "16", "--seed", "7"]
        assert main(["gen-data", "--out", str(tmp_path / "a"), *args]) == 0
        assert main(["gen-data", "--out", str(tmp_path / "b"), *args]) == 0
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        for f in files_a:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        # regenerating in place also reproduces the same bytes
        before = (tmp_path / "a" / "manifest.json").read_bytes()
        assert main(["gen-data", "--out", str(tmp_path / "a"), *args]) == 0
        assert (tmp_path / "a" / "manifest.json").read_bytes() == before

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["gen-data", "--out", str(blocker / "sub"), "--n", "2", "--size", "16"]) != 0
        assert blocker.read_text() == "x"
        assert list(tmp_path.iterdir()) == [blocker]

    def test_refuses_to_clobber_foreign_directory(self, tmp_path):
        (tmp_path / "keep.txt").write_text("mine")
        assert main(["gen-data", "--out", str(tmp_path), "--n", "2", "--size", "16"]) == 1
        assert (tmp_path / "keep.txt").read_text() == "mine"


class TestTrain:
    def test_none_two_epochs(self, workspace, tmp_path, capsys):
        _, cfg = workspace
        rc = main(["train", "--config", str(cfg), "--method", "none", "--output-dir", str(tmp_path)])
        assert rc == 0
        assert len(read_rows(tmp_path / "metrics.csv")) == 2
        assert "val mIoU" in capsys.readouterr().out

    def test_aicsd_without_teacher(self, workspace, tmp_path, capsys):
        _, cfg = workspace
        assert main(["train", "--config", str(cfg), "--method", "aicsd", "--output-dir", str(tmp_path)]) == 1
        assert "teacher" in capsys.readouterr().err

    def test_aicsd_linear_first_alpha(self, workspace, tmp_path):
        root, cfg = workspace
        rc = main([
            "train", "--config", str(cfg), "--method", "aicsd", "--teacher-ckpt", str(root / "teacher" / "best.ckpt"),
            "--set", "alw.mode=linear", "--output-dir", str(tmp_path),
        ])
        assert rc == 0
        rows = read_rows(tmp_path / "metrics.csv")
        assert float(rows[0]["alpha"]) == 0.0
        assert float(rows[1]["alpha"]) == 0.5

    def test_unknown_key(self, workspace, tmp_path, capsys):
        _, cfg = workspace
        assert main(["train", "--config", str(cfg), "--set", "train.momentun=0.5", "--output-dir", str(tmp_path)]) == 1
        assert "train.momentun" in capsys.readouterr().err
        bad = tmp_path / "bad.ini"
        bad.write_text("[train]\nwarmup = 3\n")
        assert main(["train", "--config", str(bad)]) == 1
        assert "train.warmup" in capsys.readouterr().err

    def test_flags_override_config(self, workspace, tmp_path):
        _, cfg = workspace
        rc = main(["train", "--config", str(cfg), "--method", "none", "--epochs", "1", "--seed", "5", "--output-dir", str(tmp_path)])
        assert rc == 0
        run = json.loads((tmp_path / "run.json").read_text())
        assert run["seed"] == 5 and run["student"]["seed"] == 5
        assert len(read_rows(tmp_path / "metrics.csv")) == 1

    def test_usage_error_exit_code(self):
        assert main(["train", "--method", "bogus"]) == 1
        assert main([]) == 1


class TestEval:
    def test_matches_trainer_log(self, workspace, capsys):
        root, _ = workspace
        logged = RunLog.from_csv(root / "teacher" / "metrics.csv")
        run = json.loads((root / "teacher" / "run.json").read_text())
        best_epoch = run["best"]["epoch"]
        capsys.readouterr()
        assert main(["eval", "--ckpt", str(root / "teacher" / "best.ckpt"), "--data", str(root / "val"), "--json"]) == 0
        report = json.loads(capsys.readouterr().out)
        record = logged[best_epoch - 1]
        assert report["miou"] == pytest.approx(record["val_miou"], abs=1e-6)
        assert report["pixel_accuracy"] == pytest.approx(record["val_pixacc"], abs=1e-6)

    def test_table_has_one_row_per_class(self, workspace, capsys):
        root, _ = workspace
        capsys.readouterr()
        assert main(["eval", "--ckpt", str(root / "teacher" / "last.ckpt"), "--data", str(root / "val")]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        class_rows = [l for l in lines[1:] if l.split()[0].isdigit()]
        assert [int(l.split()[0]) for l in class_rows] == [0, 1, 2]

    def test_missing_files(self, workspace, tmp_path):
        root, _ = workspace
        assert main(["eval", "--ckpt", str(tmp_path / "nope.ckpt"), "--data", str(root / "val")]) == 2
        assert main(["eval", "--ckpt", str(root / "teacher" / "last.ckpt"), "--data", str(tmp_path / "nope")]) == 2

    def test_corrupt_checkpoint(self, workspace, tmp_path):
        root, _ = workspace
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes((root / "teacher" / "last.ckpt").read_bytes()[:100])
        assert main(["eval", "--ckpt", str(bad), "--data", str(root / "val")]) == 2


class TestVisualize:
    def test_outputs(self, workspace, tmp_path):
        root, cfg = workspace
        assert main(["train", "--config", str(cfg), "--method", "none", "--output-dir", str(tmp_path / "s")]) == 0
        image = sorted((root / "val" / "images").glob("*.png"))[0]
        out = tmp_path / "viz"
        rc = main([
            "visualize", "--teacher-ckpt", str(root / "teacher" / "best.ckpt"),
            "--student-ckpt", f"plain={tmp_path / 's' / 'best.ckpt'}", "--image", str(image), "--out", str(out),
        ])
        assert rc == 0
        for name in ("teacher", "plain"):
            ics = np.loadtxt(out / f"{name}_ics.csv", delimiter=",")
            assert ics.shape == (3, 3)
            assert np.abs(np.diag(ics)).max() < 1e-9
            dist = np.load(out / f"{name}_distributions.npy")
            assert dist.shape == (3, 16, 16)
            assert np.abs(dist.reshape(3, -1).sum(1) - 1).max() < 1e-6
            assert (out / f"{name}_ics.png").stat().st_size > 0
            assert (out / f"{name}_distributions.png").stat().st_size > 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["networks"]["teacher"]["ics_loss_vs_teacher"] == 0.0
        ics_t = np.loadtxt(out / "teacher_ics.csv", delimiter=",")
        ics_s = np.loadtxt(out / "plain_ics.csv", delimiter=",")
        assert summary["networks"]["plain"]["ics_loss_vs_teacher"] == pytest.approx(
            float(losses.ics_loss(ics_t, ics_s)), rel=1e-6
        )

    def test_missing_checkpoint(self, workspace, tmp_path):
        root, _ = workspace
        image = sorted((root / "val" / "images").glob("*.png"))[0]
        rc = main(["visualize", "--teacher-ckpt", str(tmp_path / "x.ckpt"), "--image", str(image), "--out", str(tmp_path)])
        assert rc == 2


def fake_run(method, seed, miou, acc=0.9, mode="exponential_complement"):
    return {"method": method, "alw_mode": mode, "seed": seed, "best_miou": miou, "best_pixacc": acc,
            "best_epoch": 1, "per_class_iou": [miou, miou]}


class TestCompare:
    def test_grouping_and_order(self):
        runs = [fake_run("aicsd", s, 0.7 + 0.01 * s) for s in range(3)] + [fake_run("none", 0, 0.6)]
        with pytest.warns(UserWarning, match="kd"):
            rows = summarize_runs(runs)
        assert [r["method"] for r in rows] == ["none", "aicsd"]
        assert rows[1]["runs"] == 3 and rows[1]["miou_std"] > 0
        assert rows[1]["miou_mean"] == pytest.approx(0.71)
        assert rows[0]["miou_std"] == 0.0

    def test_alw_variants_split(self):
        runs = [fake_run("aicsd", 0, 0.7, mode="linear"), fake_run("aicsd", 0, 0.72, mode="exponential")]
        rows = summarize_runs(runs + [fake_run(m, 0, 0.6) for m in ("none", "kd", "icsd")])
        assert [r["method"] for r in rows] == ["none", "kd", "icsd", "aicsd[exponential]", "aicsd[linear]"]

    def test_command(self, workspace, tmp_path, capsys):
        root, cfg = workspace
        dirs = []
        for seed in (0, 1):
            d = tmp_path / f"none{seed}"
            assert main(["train", "--config", str(cfg), "--method", "none", "--seed", str(seed), "--output-dir", str(d)]) == 0
            dirs.append(str(d))
        capsys.readouterr()
        assert main(["compare", "--runs", *dirs, "--out", str(tmp_path / "cmp")]) == 0
        printed = capsys.readouterr().out
        assert "none" in printed
        summary = json.loads((tmp_path / "cmp" / "summary.json").read_text())
        assert len(summary["rows"]) == 1 and summary["rows"][0]["runs"] == 2
        assert (tmp_path / "cmp" / "per_class_iou.png").stat().st_size > 0
        assert (tmp_path / "cmp" / "summary.txt").exists()
