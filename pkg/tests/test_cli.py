import csv

import numpy as np
import pytest

from mbtnet import tensor as T
from mbtnet.cli import GREEN, ORANGE, RED, main, render_overlay
from mbtnet.data import read_png_gray, write_png_gray

SMALL = """\
plan.patch = 32,32
plan.train = 4
plan.val = 2
plan.test = 2
plan.patches_per_image = 2
synth.image_size = 48,48
synth.cell_count = 10
model.widths = 4,8,16,32
run.epochs = 1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.cfg").write_text(SMALL)
    assert main(["synth", "--config", str(root / "small.cfg"), "--out", str(root / "data"),
                 "-q"]) == 0
    assert main(["train", "--config", str(root / "small.cfg"), "--out", str(root / "run"),
                 "--data", str(root / "data" / "manifest.tsv"), "-q"]) == 0
    return root


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestUsage:
    def test_unknown_flag_exit_1(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--bogus"])
        assert exc.value.code == 1

    def test_missing_out_exit_1(self, capsys):
        assert main(["synth"]) == 1
        assert "--out" in capsys.readouterr().err

    def test_bad_config_key_exit_1(self, tmp_path, capsys):
        (tmp_path / "bad.cfg").write_text("model.depth_of_field = 3\n")
        assert main(["synth", "--config", str(tmp_path / "bad.cfg"),
                     "--out", str(tmp_path / "o")]) == 1
        assert "depth_of_field" in capsys.readouterr().err

    def test_missing_manifest_exit_2(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope.tsv"),
                     "--out", str(tmp_path / "o"), "-q"]) == 2


class TestSynth:
    def test_byte_identical(self, workspace, tmp_path):
        assert main(["synth", "--config", str(workspace / "small.cfg"),
                     "--out", str(tmp_path / "again"), "-q"]) == 0
        for path in sorted((workspace / "data").rglob("*")):
            if path.is_file():
                twin = tmp_path / "again" / path.relative_to(workspace / "data")
                assert path.read_bytes() == twin.read_bytes(), path.name

    def test_refuses_non_empty(self, workspace, capsys):
        assert main(["synth", "--config", str(workspace / "small.cfg"),
                     "--out", str(workspace / "data")]) == 1
        assert "--force" in capsys.readouterr().err

    def test_run_cfg_written(self, workspace):
        text = (workspace / "data" / "run.cfg").read_text()
        assert "synth.cell_count = 10" in text and "run.seed = 0" in text


class TestTrainEval:
    def test_train_artifacts(self, workspace):
        run = workspace / "run"
        for name in ("run.cfg", "last.ckpt", "last.ckpt.cfg", "report.csv"):
            assert (run / name).is_file()
        assert "model.input_size = 32,32" in (run / "run.cfg").read_text()

    def test_zero_epochs_initial_checkpoint_only(self, workspace, tmp_path):
        assert main(["train", "--config", str(workspace / "small.cfg"), "--epochs", "0",
                     "--data", str(workspace / "data" / "manifest.tsv"),
                     "--out", str(tmp_path), "-q"]) == 0
        assert (tmp_path / "last.ckpt").is_file() and not (tmp_path / "best.ckpt").exists()

    def test_eval_columns(self, workspace, tmp_path):
        assert main(["eval", "--checkpoint", str(workspace / "run" / "last.ckpt"),
                     "--data", str(workspace / "data" / "manifest.tsv"),
                     "--out", str(tmp_path), "-q"]) == 0
        rows = read_csv(tmp_path / "metrics.csv")
        assert list(rows[0]) == ["id", "dice", "f1", "se", "sp"]
        assert [r["id"] for r in rows[-2:]] == ["pooled", "mean"] and len(rows) == 4

    def test_oracle_mode_all_one(self, workspace, tmp_path):
        assert main(["eval", "--oracle-mode", "--split", "test",
                     "--data", str(workspace / "data" / "manifest.tsv"),
                     "--out", str(tmp_path), "-q"]) == 0
        for row in read_csv(tmp_path / "metrics.csv"):
            assert all(float(row[k]) == 1.0 for k in ("dice", "f1", "se", "sp"))

    def test_mismatch_names_fields(self, workspace, tmp_path, capsys):
        code = main(["eval", "--checkpoint", str(workspace / "run" / "last.ckpt"),
                     "--data", str(workspace / "data" / "manifest.tsv"), "--tr-depth", "3",
                     "--heads", "4", "--out", str(tmp_path)])
        err = capsys.readouterr().err
        assert code == 2 and "tr_depth" in err and "heads" in err


class TestPredict:
    def test_mask_and_overlay(self, workspace, tmp_path):
        image = workspace / "data" / "images" / sorted(
            p.name for p in (workspace / "data" / "images").iterdir())[0]
        gt = workspace / "data" / "masks" / image.name
        assert main(["predict", "--checkpoint", str(workspace / "run" / "last.ckpt"),
                     "--image", str(image), "--gt", str(gt), "--out", str(tmp_path), "-q"]) == 0
        mask = read_png_gray(tmp_path / f"{image.stem}_mask.png")
        assert mask.shape == (32, 32) and set(np.unique(mask)) <= {0, 255}
        assert (tmp_path / f"{image.stem}_overlay.png").is_file()

    def test_size_not_divisible(self, workspace, tmp_path, capsys):
        write_png_gray(tmp_path / "odd.png", np.zeros((30, 32)))
        code = main(["predict", "--checkpoint", str(workspace / "run" / "last.ckpt"),
                     "--image", str(tmp_path / "odd.png"), "--out", str(tmp_path / "o")])
        err = capsys.readouterr().err
        assert code == 2 and "divisible by 8" in err and "(32, 32)" in err


def overlay_oracle(background, pred, gt):
    out = np.zeros(background.shape + (3,), np.uint8)
    for i in range(background.shape[0]):
        for j in range(background.shape[1]):
            p, g = bool(pred[i, j]), bool(gt[i, j])
            if p and g:
                out[i, j] = ORANGE
            elif p:
                out[i, j] = RED
            elif g:
                out[i, j] = GREEN
            else:
                out[i, j] = background[i, j]
    return out


class TestOverlay:
    def test_brute_force(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            bg = rng.integers(0, 256, (9, 11)).astype(np.uint8)
            pred, gt = rng.random((9, 11)) < 0.4, rng.random((9, 11)) < 0.4
            np.testing.assert_array_equal(render_overlay(bg, pred, gt),
                                          overlay_oracle(bg, pred, gt))

    def test_perfect_prediction_has_no_red_or_green(self):
        rng = np.random.default_rng(1)
        gt = rng.random((12, 12)) < 0.3
        rgb = render_overlay(np.full((12, 12), 128, np.uint8), gt, gt)
        colors = {tuple(c) for c in rgb.reshape(-1, 3)}
        assert RED not in colors and GREEN not in colors

    def test_empty_prediction_all_green(self):
        gt = np.random.default_rng(2).random((12, 12)) < 0.3
        rgb = render_overlay(np.full((12, 12), 128, np.uint8), np.zeros_like(gt), gt)
        assert int(np.all(rgb == GREEN, axis=2).sum()) == int(gt.sum())


class TestGradcheck:
    def test_passes(self, tmp_path, capsys):
        assert main(["gradcheck", "--out", str(tmp_path), "-q"]) == 0
        text = (tmp_path / "gradcheck.txt").read_text()
        assert "max_rel_error" in text and "FAIL" not in text

    def test_broken_op_exit_3(self, monkeypatch, capsys):
        original = T.sigmoid

        def broken(x):
            out = original(x)
            backward = out._backward
            out._backward = lambda g: tuple(1.1 * b for b in backward(g))
            return out

        monkeypatch.setattr(T, "sigmoid", broken)
        assert main(["gradcheck", "-q"]) == 3
        assert "sigmoid" in capsys.readouterr().err


@pytest.mark.slow
def test_ablate_grid(workspace, tmp_path):
    assert main(["ablate", "--config", str(workspace / "small.cfg"),
                 "--data", str(workspace / "data" / "manifest.tsv"),
                 "--out", str(tmp_path), "-q"]) == 0
    rows = read_csv(tmp_path / "ablation.csv")
    assert len(rows) == 10
    off = [r for r in rows if r["body_edge"] == "off"]
    assert len(off) == 5
    assert all(float(r["train_edge"]) == 0.0 and float(r["train_body"]) == 0.0 for r in off)
    on = {r["tr_depth"]: int(r["params"]) for r in rows if r["body_edge"] == "on"}
    assert all(int(r["params"]) < on[r["tr_depth"]] for r in off)
