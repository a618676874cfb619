import json
import subprocess
import sys

import numpy as np
import pytest
import torch

from mvdepth.camera import Intrinsics, fixed_cuboid_rig
from mvdepth.cli import EXIT_IO, EXIT_MISMATCH, EXIT_OK, EXIT_USAGE, main
from mvdepth.denoiser import DenoiserConfig, build_denoiser, load_checkpoint
from mvdepth.geometry import read_ply
from mvdepth.io import read_depth_container, read_meta, write_pfm

TINY = {"base_channels": 8, "groups": 4, "levels": 2, "channel_multipliers": [1, 2],
        "attention_levels": [1], "k": 4, "T": 10, "batch_size": 4}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.json").write_text(json.dumps(TINY))
    assert run("gen-data", "--count", 6, "--views", 4, "--res", 8, "--seed", 7,
               "--out", root / "d.mvdd") == EXIT_OK
    assert run("train", "--config", root / "tiny.json", "--data", root / "d.mvdd", "--epochs", 2,
               "--seed", 1, "--out", root / "m.ckpt") == EXIT_OK
    return root


class TestGenData:
    def test_outputs_and_determinism(self, work, tmp_path, capsys):
        out = tmp_path / "d.mvdd"
        assert run("gen-data", "--count", 6, "--views", 4, "--res", 8, "--seed", 7, "--out", out) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["count"] == 6 and summary["N"] == 4
        assert out.read_bytes() == (work / "d.mvdd").read_bytes()
        assert (tmp_path / "d.mvdd.png").read_bytes() == (work / "d.mvdd.png").read_bytes()

    def test_missing_out(self, capsys):
        assert run("gen-data", "--count", 2) == EXIT_USAGE
        assert "usage" in capsys.readouterr().err

    def test_bad_flag_value(self, tmp_path):
        assert run("gen-data", "--count", "many", "--out", tmp_path / "x") == EXIT_USAGE
        assert run("gen-data", "--count", 0, "--out", tmp_path / "x") == EXIT_USAGE

    def test_dynamic_rig(self, tmp_path):
        out = tmp_path / "dyn.mvdd"
        assert run("gen-data", "--count", 2, "--views", 8, "--res", 8, "--rig", "dynamic",
                   "--first-camera", 1, -1, 1, "--out", out) == 0
        assert read_meta(out)["N"] == 8


class TestTrain:
    def test_csv_and_sidecars(self, work):
        rows = (work / "m.ckpt.loss.csv").read_text().splitlines()
        assert rows[0] == "epoch,loss" and len(rows) == 3
        resolved = json.loads((work / "m.ckpt.config.json").read_text())
        assert resolved["seed"] == 1 and resolved["base_channels"] == 8
        assert (work / "m.ckpt.loss.png").exists()

    def test_same_seed_identical(self, work, tmp_path):
        out = tmp_path / "m.ckpt"
        assert run("train", "--config", work / "tiny.json", "--data", work / "d.mvdd",
                   "--epochs", 2, "--seed", 1, "--out", out) == 0
        assert out.read_bytes() == (work / "m.ckpt").read_bytes()
        assert (tmp_path / "m.ckpt.loss.csv").read_text() == (work / "m.ckpt.loss.csv").read_text()

    def test_zero_epochs_is_initialisation(self, work, tmp_path):
        out = tmp_path / "init.ckpt"
        assert run("train", "--config", work / "tiny.json", "--data", work / "d.mvdd",
                   "--epochs", 0, "--seed", 4, "--out", out) == 0
        model, meta = load_checkpoint(out)
        fresh = build_denoiser(DenoiserConfig.from_dict(meta["config"]), seed=4)
        for key, val in fresh.state_dict().items():
            assert torch.equal(val, model.state_dict()[key])

    def test_mismatch(self, work, tmp_path):
        assert run("train", "--data", work / "d.mvdd", "--views", 8, "--out", tmp_path / "m") == EXIT_MISMATCH
        assert run("train", "--data", work / "d.mvdd", "--res", 16, "--out", tmp_path / "m") == EXIT_MISMATCH

    def test_missing_dataset(self, tmp_path):
        assert run("train", "--data", tmp_path / "none.mvdd", "--out", tmp_path / "m") == EXIT_USAGE

    def test_corrupt_dataset(self, tmp_path):
        bad = tmp_path / "bad.mvdd"
        bad.write_bytes(b"garbage")
        assert run("train", "--data", bad, "--out", tmp_path / "m") == EXIT_IO

    def test_config_precedence(self, work, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({**TINY, "seed": 3, "epochs": 1}))
        out = tmp_path / "m.ckpt"
        assert run("train", "--config", cfg, "--data", work / "d.mvdd", "--seed", 5, "--out", out) == 0
        resolved = json.loads((tmp_path / "m.ckpt.config.json").read_text())
        assert (resolved["seed"], resolved["epochs"], resolved["lr"]) == (5, 1, 2e-4)

    def test_bad_config(self, work, tmp_path):
        assert run("train", "--config", tmp_path / "none.json", "--data", work / "d.mvdd",
                   "--out", tmp_path / "m") == EXIT_USAGE


class TestSample:
    def test_outputs(self, work, tmp_path, capsys):
        out, ply = tmp_path / "s.mvdd", tmp_path / "s.ply"
        assert run("sample", "--ckpt", work / "m.ckpt", "--seed", 5, "--out", out, "--ply", ply) == 0
        summary = json.loads(capsys.readouterr().out)
        meta, data = read_depth_container(out)
        assert data.shape == (1, 4, 8, 8) and meta["kind"] == "samples"
        assert len(read_ply(ply)) == summary["points"]
        assert (tmp_path / "s.mvdd.png").exists() and (tmp_path / "s.mvdd.config.json").exists()

    def test_deterministic_and_seeded(self, work, tmp_path):
        paths = []
        for name, seed in (("a", 5), ("b", 5), ("c", 6)):
            paths.append(tmp_path / f"{name}.mvdd")
            assert run("sample", "--ckpt", work / "m.ckpt", "--seed", seed, "--out", paths[-1]) == 0
        a, b, c = (p.read_bytes() for p in paths)
        assert a == b and a != c

    def test_fusion_window_zero(self, work, tmp_path):
        out = tmp_path / "s.mvdd"
        assert run("sample", "--ckpt", work / "m.ckpt", "--fusion-window", 0, "--count", 2, "--out", out) == 0
        meta, data = read_depth_container(out)
        assert meta["sampler"]["fusion_window"] == 0 and len(data) == 2

    def test_window_longer_than_chain(self, work, tmp_path):
        assert run("sample", "--ckpt", work / "m.ckpt", "--fusion-window", 11,
                   "--out", tmp_path / "s.mvdd") == EXIT_USAGE

    def test_rig_mismatch(self, work, tmp_path):
        rig = tmp_path / "rig.json"
        rig.write_text(fixed_cuboid_rig(Intrinsics.default(8), views=8).to_json())
        assert run("sample", "--ckpt", work / "m.ckpt", "--rig", rig, "--out", tmp_path / "s") == EXIT_MISMATCH

    def test_missing_checkpoint(self, tmp_path):
        assert run("sample", "--ckpt", tmp_path / "none", "--out", tmp_path / "s") == EXIT_USAGE


class TestComplete:
    def test_pfm_input_kept_bitwise(self, work, tmp_path):
        _, data = read_depth_container(work / "d.mvdd")
        pfm = tmp_path / "v1.pfm"
        write_pfm(pfm, data[2, 1])
        out = tmp_path / "c.mvdd"
        assert run("complete", "--ckpt", work / "m.ckpt", "--input", pfm, "--view", 1, "--out", out) == 0
        meta, comp = read_depth_container(out)
        assert comp[0, 1].tobytes() == data[2, 1].tobytes()
        assert meta["kind"] == "completion" and meta["view"] == 1
        again = tmp_path / "c2.mvdd"
        run("complete", "--ckpt", work / "m.ckpt", "--input", pfm, "--view", 1, "--out", again)
        assert again.read_bytes() == out.read_bytes()

    def test_container_input(self, work, tmp_path):
        out = tmp_path / "c.mvdd"
        assert run("complete", "--ckpt", work / "m.ckpt", "--input", work / "d.mvdd", "--index", 3,
                   "--view", 0, "--out", out) == 0
        _, data = read_depth_container(work / "d.mvdd")
        assert read_depth_container(out)[1][0, 0].tobytes() == data[3, 0].tobytes()

    @pytest.mark.parametrize("view", [-1, 4])
    def test_bad_view(self, work, tmp_path, view):
        assert run("complete", "--ckpt", work / "m.ckpt", "--input", work / "d.mvdd",
                   "--view", view, "--out", tmp_path / "c") == EXIT_USAGE

    def test_missing_input(self, work, tmp_path):
        assert run("complete", "--ckpt", work / "m.ckpt", "--input", tmp_path / "none.pfm",
                   "--view", 0, "--out", tmp_path / "c") == EXIT_USAGE

    def test_wrong_size(self, work, tmp_path):
        pfm = tmp_path / "big.pfm"
        write_pfm(pfm, np.zeros((16, 16), np.float32))
        assert run("complete", "--ckpt", work / "m.ckpt", "--input", pfm, "--view", 0,
                   "--out", tmp_path / "c") == EXIT_MISMATCH


class TestFuseAndExport:
    def test_fuse(self, work, tmp_path, capsys):
        out = tmp_path / "f.ply"
        assert run("fuse", "--input", work / "d.mvdd", "--index", 0, "--out", out) == 0
        assert len(read_ply(out)) == json.loads(capsys.readouterr().out)["points"] > 0
        again = tmp_path / "g.ply"
        run("fuse", "--input", work / "d.mvdd", "--index", 0, "--out", again)
        assert again.read_bytes() == out.read_bytes()

    def test_fuse_average_and_strict_filter(self, work, tmp_path, capsys):
        run("fuse", "--input", work / "d.mvdd", "--index", 0, "--out", tmp_path / "a.ply")
        loose = json.loads(capsys.readouterr().out)["points"]
        run("fuse", "--input", work / "d.mvdd", "--index", 0, "--min-views", 3, "--average",
            "--out", tmp_path / "b.ply")
        assert json.loads(capsys.readouterr().out)["points"] <= loose

    def test_export_counts_foreground(self, work, tmp_path):
        out = tmp_path / "e.ply"
        assert run("export-ply", "--input", work / "d.mvdd", "--index", 1, "--out", out) == 0
        _, data = read_depth_container(work / "d.mvdd")
        assert len(read_ply(out)) == int((data[1] < 1 - 1e-4).sum())

    def test_index_out_of_range(self, work, tmp_path):
        assert run("export-ply", "--input", work / "d.mvdd", "--index", 9, "--out", tmp_path / "e") == EXIT_USAGE


def write_clouds(path, clouds):
    np.savez(path, **{f"c{i:03d}": c for i, c in enumerate(clouds)})


class TestEval:
    def test_identical_sets(self, tmp_path, rng):
        clouds = [rng.normal(size=(6, 3)) + 5 * i for i in range(4)]
        write_clouds(tmp_path / "g.npz", clouds)
        out = tmp_path / "r.json"
        assert run("eval", "--gen", tmp_path / "g.npz", "--ref", tmp_path / "g.npz",
                   "--metric", "cd", "--metric", "emd", "--out", out) == 0
        report = json.loads(out.read_text())["metrics"]
        assert report["cov-cd"] == report["cov-emd"] == 1.0
        assert report["mmd-cd"] == report["mmd-emd"] == 0.0
        assert (tmp_path / "r.json.txt").exists() and (tmp_path / "r.json.png").exists()

    def test_oracle_agrees(self, tmp_path, rng):
        write_clouds(tmp_path / "g.npz", [rng.normal(size=(5, 3)) for _ in range(4)])
        write_clouds(tmp_path / "r.npz", [rng.normal(size=(5, 3)) for _ in range(4)])
        out = tmp_path / "r.json"
        assert run("eval", "--gen", tmp_path / "g.npz", "--ref", tmp_path / "r.npz", "--oracle",
                   "--out", out) == 0
        oracle = json.loads(out.read_text())["oracle"]
        assert oracle["agree"] and oracle["max_abs_diff"] <= 1e-9

    def test_unequal_counts(self, tmp_path, rng):
        write_clouds(tmp_path / "g.npz", [rng.normal(size=(5, 3)), rng.normal(size=(7, 3))])
        write_clouds(tmp_path / "r.npz", [rng.normal(size=(6, 3)), rng.normal(size=(6, 3))])
        args = ("eval", "--gen", tmp_path / "g.npz", "--ref", tmp_path / "r.npz", "--out", tmp_path / "o.json")
        assert run(*args) == EXIT_MISMATCH
        assert run(*args, "--metric", "cd") == EXIT_OK
        assert run(*args, "--subsample", 5, "--seed", 2) == EXIT_OK

    def test_deterministic_with_subsample(self, tmp_path, rng):
        write_clouds(tmp_path / "g.npz", [rng.normal(size=(20, 3)) for _ in range(3)])
        outs = [tmp_path / "a.json", tmp_path / "b.json"]
        for out in outs:
            run("eval", "--gen", tmp_path / "g.npz", "--ref", tmp_path / "g.npz", "--subsample", 8,
                "--out", out)
        assert outs[0].read_bytes() == outs[1].read_bytes()
        assert (tmp_path / "a.json.png").read_bytes() == (tmp_path / "b.json.png").read_bytes()

    def test_container_input(self, work, tmp_path):
        out = tmp_path / "o.json"
        assert run("eval", "--gen", work / "d.mvdd", "--ref", work / "d.mvdd", "--metric", "cd",
                   "--out", out) == 0
        assert json.loads(out.read_text())["generated"] == 6


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "mvdepth.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("gen-data", "train", "sample", "complete", "eval", "fuse", "export-ply"):
        assert name in proc.stdout


def test_no_command():
    assert main([]) == EXIT_USAGE
