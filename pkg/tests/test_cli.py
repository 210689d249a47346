"""Command-level behavior: files written, determinism, error prefixes."""

import os

import numpy as np
import pytest

import weatherflow.cli as cli
import weatherflow.datasynth as dsy
from weatherflow.networks import load_checkpoint


def run(argv):
    return cli.main(argv)


TINY_TRAIN = [
    "--set", "resolution=32", "--set", "steps_stage1=2", "--set", "steps_stage2=2",
    "--set", "steps_stage3=1", "--set", "stage2_pretrain_frac=0.5", "--set", "n=2",
    "--set", "patch=8", "--set", "checkpoint_every=0", "--set", "occlusion_warmup_frac=1.0",
]


def gen(out, seed, scenes=4, size=32, extra=()):
    assert run(["generate-data", "--out", str(out), "--scenes", str(scenes), "--size", str(size), "--seed", str(seed), *extra]) == 0


class TestGenerateData:
    def test_scene_count_and_files(self, tmp_path, capsys):
        gen(tmp_path / "d", 3)
        out = capsys.readouterr().out
        assert "wrote 4 scenes" in out and "clamp incidence" in out
        dirs = sorted(os.listdir(tmp_path / "d" / "scenes"))
        assert len(dirs) == 4
        for d in dirs:
            assert sorted(os.listdir(tmp_path / "d" / "scenes" / d)) == sorted(dsy.SCENE_FILES)

    def test_same_seed_byte_identical_manifests(self, tmp_path):
        gen(tmp_path / "a", 5)
        gen(tmp_path / "b", 5)
        for d in os.listdir(tmp_path / "a" / "scenes"):
            ma = (tmp_path / "a" / "scenes" / d / "manifest.txt").read_bytes()
            mb = (tmp_path / "b" / "scenes" / d / "manifest.txt").read_bytes()
            assert ma == mb

    def test_fog_intensity_recorded(self, tmp_path):
        gen(tmp_path / "d", 7, extra=["--degradation", "fog", "--intensity", "0.2"])
        d = sorted(os.listdir(tmp_path / "d" / "scenes"))[0]
        manifest = (tmp_path / "d" / "scenes" / d / "manifest.txt").read_text()
        assert "degradation.kind = fog_veil" in manifest
        assert "degradation.intensity = 0.2" in manifest

    def test_unknown_degradation_errors(self, tmp_path, capsys):
        assert run(["generate-data", "--out", str(tmp_path / "d"), "--degradation", "hail"]) == 1
        assert "error[config]" in capsys.readouterr().err


class TestTrainEvalInferVisualize:
    @pytest.fixture(scope="class")
    def pipeline(self, tmp_path_factory):
        root = tmp_path_factory.mktemp("pipe")
        gen(root / "train", 21)
        gen(root / "test", 22)
        assert run(["train", "--data", str(root / "train"), "--out", str(root / "run"), "--stage", "all", "--seed", "2", *TINY_TRAIN]) == 0
        return root

    def test_train_outputs(self, pipeline):
        assert (pipeline / "run" / "stage3.ckpt").exists()
        assert (pipeline / "run" / "train_log.txt").exists()
        assert (pipeline / "run" / "loss_curves.png").exists()
        meta, _ = load_checkpoint(pipeline / "run" / "stage3.ckpt")
        assert meta["stage"] == 3

    def test_eval_writes_report_and_figure(self, pipeline, capsys):
        report = pipeline / "eval.txt"
        assert run(["eval", "--checkpoint", str(pipeline / "run" / "stage3.ckpt"), "--data", str(pipeline / "test"), "--report", str(report)]) == 0
        out = capsys.readouterr().out
        assert "EPE" in out
        text = report.read_text()
        assert text.startswith("# dataset = test")
        assert "scene_id\tepe\tf1_all\tvalid_px" in text
        assert (pipeline / "eval.png").exists()

    def test_eval_rejects_leakage(self, pipeline, capsys):
        assert run(["eval", "--checkpoint", str(pipeline / "run" / "stage3.ckpt"), "--data", str(pipeline / "train"), "--report", str(pipeline / "leak.txt")]) == 1
        assert "error[usage]" in capsys.readouterr().err

    def test_infer_then_visualize_roundtrip(self, pipeline):
        scene = sorted(os.listdir(pipeline / "test" / "scenes"))[0]
        sdir = pipeline / "test" / "scenes" / scene
        flo = pipeline / "pred.flo"
        assert run(["infer", "--checkpoint", str(pipeline / "run" / "stage3.ckpt"), "--frame1", str(sdir / "degraded1.png"), "--frame2", str(sdir / "degraded2.png"), "--out-flo", str(flo)]) == 0
        flow = dsy.read_flo(flo)
        assert flow.shape == (2, 32, 32) and np.all(np.isfinite(flow))
        png = pipeline / "pred.png"
        assert run(["visualize", "--flo", str(flo), "--out-png", str(png)]) == 0
        import cv2

        img = cv2.imread(str(png))
        assert img is not None and img.shape == (32, 32, 3)

    def test_visualize_any_valid_flo(self, tmp_path):
        rng = np.random.default_rng(0)
        flo = tmp_path / "r.flo"
        dsy.write_flo(rng.normal(size=(2, 16, 16)) * 5, flo)
        assert run(["visualize", "--flo", str(flo), "--out-png", str(tmp_path / "r.png")]) == 0

    def test_stage_resume_matches_straight_run(self, tmp_path):
        gen(tmp_path / "data", 31)
        base = ["--data", str(tmp_path / "data"), "--seed", "4", *TINY_TRAIN]
        assert run(["train", "--out", str(tmp_path / "all"), "--stage", "1", *base]) == 0
        assert run(["train", "--out", str(tmp_path / "all"), "--stage", "2", "--resume", str(tmp_path / "all" / "stage1.ckpt"), *base]) == 0
        assert run(["train", "--out", str(tmp_path / "one"), "--stage", "all", *base]) == 0
        a = (tmp_path / "all" / "stage2.ckpt").read_bytes()
        b = (tmp_path / "one" / "stage2.ckpt").read_bytes()
        assert a == b

    def test_bad_config_key_named(self, tmp_path, capsys):
        gen(tmp_path / "data", 41)
        code = run(["train", "--data", str(tmp_path / "data"), "--out", str(tmp_path / "o"), "--set", "learning_rat=0.1", *TINY_TRAIN])
        assert code == 1
        assert "learning_rat" in capsys.readouterr().err

    def test_unknown_flag_rejected(self):
        with pytest.raises(SystemExit):
            run(["train", "--data", "x", "--out", "y", "--turbo"])


class TestAblateCommand:
    def test_empty_grid_errors(self, tmp_path, capsys):
        grid = tmp_path / "grid.txt"
        grid.write_text("# nothing here\n")
        gen(tmp_path / "tr", 51)
        gen(tmp_path / "te", 52)
        code = run(["ablate", "--grid", str(grid), "--data", str(tmp_path / "tr"), "--test-data", str(tmp_path / "te"), "--out", str(tmp_path / "o")])
        assert code == 1
        assert "empty ablation grid" in capsys.readouterr().err

    def test_incompatible_combo_named_before_training(self, tmp_path, capsys):
        grid = tmp_path / "grid.txt"
        grid.write_text("bad: literal_contrastive=true grad_through_warp_error=true\n")
        gen(tmp_path / "tr", 53)
        gen(tmp_path / "te", 54)
        code = run(["ablate", "--grid", str(grid), "--data", str(tmp_path / "tr"), "--test-data", str(tmp_path / "te"), "--out", str(tmp_path / "o")])
        assert code == 1
        err = capsys.readouterr().err
        assert "literal_contrastive" in err and "grad_through_warp_error" in err

    def test_two_row_grid_runs_and_tabulates(self, tmp_path):
        grid = tmp_path / "grid.txt"
        grid.write_text("shared: shared_encoders=true\nunshared: shared_encoders=false\n")
        gen(tmp_path / "tr", 55)
        gen(tmp_path / "te", 56)
        code = run(
            [
                "ablate", "--grid", str(grid), "--data", str(tmp_path / "tr"), "--test-data", str(tmp_path / "te"),
                "--out", str(tmp_path / "o"), "--seeds", "0,1,2", *TINY_TRAIN,
            ]
        )
        assert code == 0
        table = (tmp_path / "o" / "ablation.tsv").read_text()
        lines = [l for l in table.splitlines() if l and not l.startswith("#")]
        assert lines[0].startswith("label\t")
        assert {l.split("\t")[0] for l in lines[1:]} == {"shared", "unshared"}
        assert (tmp_path / "o" / "ablation.png").exists()
