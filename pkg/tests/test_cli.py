import subprocess
import sys

import numpy as np
import pytest

from pointfill.ca_decoder import load_attention
from pointfill.checkpoint import load_checkpoint
from pointfill.cli import main
from pointfill.dataset import load_xyz


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("dataset", "--out", root / "data", "--shapes", "sphere,cube", "--n", 384, "--count", 3,
               "--seed", 1, "--image-size", 16) == 0
    assert run("train", "--data", root / "data", "--config", "tiny", "--epochs", 2, "--out", root / "s1.ckpt") == 0
    assert run("train", "--data", root / "data", "--config", "tiny", "--epochs", 1, "--stage", 2,
               "--resume", root / "s1.ckpt", "--out", root / "s2.ckpt") == 0
    return root


class TestDataset:
    def test_files(self, workdir):
        data = workdir / "data"
        assert len(list(data.glob("*.xyz"))) == 3 and len(list(data.glob("*.pgm"))) == 3
        rows = [l for l in (data / "manifest.txt").read_text().splitlines() if not l.startswith("#")]
        assert len(rows) == 3

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a", "b"):
            assert run("dataset", "--out", tmp_path / name, "--count", 2, "--n", 200, "--image-size", 16) == 0
        for f in (tmp_path / "a").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_bad_shape(self, tmp_path, capsys):
        assert run("dataset", "--out", tmp_path / "x", "--shapes", "pyramid") == 2
        assert "pyramid" in capsys.readouterr().err

    def test_unwritable(self, tmp_path):
        (tmp_path / "file").write_text("")
        assert run("dataset", "--out", tmp_path / "file") == 2


class TestTrain:
    def test_outputs(self, workdir, capsys):
        s2 = load_checkpoint(workdir / "s2.ckpt")
        assert load_checkpoint(workdir / "s1.ckpt").stage == 1 and s2.stage == 2
        log = (workdir / "s1.log.csv").read_text().splitlines()
        assert log[0] == "epoch,stage,loss" and len(log) == 3

    def test_prints_resolved_config(self, workdir, tmp_path, capsys):
        assert run("train", "--data", workdir / "data", "--config", "tiny", "--epochs", 0, "--lr", 0.01,
                   "--set", "variant=l1", "--out", tmp_path / "c.ckpt") == 0
        out = capsys.readouterr().out
        assert "# resolved config" in out and "lr = 0.01" in out and "variant = l1" in out
        assert "token_size = 64" in out and "epochs = 0" in out

    def test_stage_two_without_checkpoint_warns(self, workdir, tmp_path, capsys):
        assert run("train", "--data", workdir / "data", "--config", "tiny", "--epochs", 0, "--stage", 2,
                   "--out", tmp_path / "c.ckpt", "--log", tmp_path / "log.csv") == 0
        assert "warning" in capsys.readouterr().err
        assert (tmp_path / "log.csv").read_text().splitlines()[1].startswith("# warning:")

    def test_missing_manifest(self, tmp_path, capsys):
        assert run("train", "--data", tmp_path / "nothing", "--config", "tiny", "--out", tmp_path / "c") == 2
        assert str(tmp_path / "nothing" / "manifest.txt") in capsys.readouterr().err

    def test_unknown_key(self, workdir, tmp_path):
        assert run("train", "--data", workdir / "data", "--config", "tiny", "--set", "depth=3",
                   "--out", tmp_path / "c") == 2

    def test_image_not_divisible(self, tmp_path, capsys):
        assert run("dataset", "--out", tmp_path / "d", "--count", 1, "--n", 300, "--image-size", 60) == 0
        assert run("train", "--data", tmp_path / "d", "--config", "base", "--epochs", 1,
                   "--out", tmp_path / "c") == 2
        assert "not divisible" in capsys.readouterr().err

    def test_checkpoint_config_mismatch(self, workdir, tmp_path, capsys):
        assert run("train", "--data", workdir / "data", "--config", "tiny", "--set", "token_size=32",
                   "--resume", workdir / "s1.ckpt", "--stage", 2, "--out", tmp_path / "c") == 2
        assert "shape" in capsys.readouterr().err

    def test_no_stage_regression(self, workdir, tmp_path):
        assert run("train", "--data", workdir / "data", "--resume", workdir / "s2.ckpt", "--stage", 1,
                   "--epochs", 0, "--out", tmp_path / "c") == 2


class TestReconstruct:
    def args(self, workdir, out, *extra):
        return ["reconstruct", "--ckpt", workdir / "s2.ckpt", "--cloud", workdir / "data" / "sphere_0000.xyz",
                "--image", workdir / "data" / "sphere_0000.pgm", "--mask-seed", 4, "--out", out, *extra]

    def test_outputs(self, workdir, tmp_path):
        assert run(*self.args(workdir, tmp_path / "r.xyz", "--dump-attn", tmp_path / "a.attn")) == 0
        assert len(load_xyz(tmp_path / "r.xyz")) == 16 * 8
        assert len(load_xyz(tmp_path / "r.input.xyz")) == 5 * 8
        attn = load_attention(tmp_path / "a.attn")
        assert attn.shape == (1, 4, 16, 16)
        np.testing.assert_allclose(attn.sum(-1), 1.0, atol=1e-6)

    def test_input_frame(self, workdir, tmp_path):
        # visible points are copies of input points, back in the input's coordinates
        assert run(*self.args(workdir, tmp_path / "r.xyz")) == 0
        cloud = load_xyz(workdir / "data" / "sphere_0000.xyz")
        vis = load_xyz(tmp_path / "r.input.xyz")
        d = np.min(((vis[:, None] - cloud[None]) ** 2).sum(-1), axis=1)
        assert d.max() < 1e-20

    def test_deterministic(self, workdir, tmp_path):
        for name in ("a", "b"):
            assert run(*self.args(workdir, tmp_path / f"{name}.xyz", "--dump-attn", tmp_path / f"{name}.attn")) == 0
        assert (tmp_path / "a.xyz").read_bytes() == (tmp_path / "b.xyz").read_bytes()
        assert (tmp_path / "a.attn").read_bytes() == (tmp_path / "b.attn").read_bytes()

    def test_stage_one_cannot_dump(self, workdir, tmp_path):
        args = self.args(workdir, tmp_path / "r.xyz", "--dump-attn", tmp_path / "a")
        args[2] = workdir / "s1.ckpt"
        assert run(*args) == 2


class TestEval:
    def test_table(self, workdir, tmp_path):
        assert run("eval", "--ckpt", workdir / "s2.ckpt", "--data", workdir / "data", "--out", tmp_path / "e.csv") == 0
        lines = (tmp_path / "e.csv").read_text().splitlines()
        assert lines[0] == "sample_id,chamfer_l2sq,chamfer_l1" and len(lines) == 4
        assert run("eval", "--ckpt", workdir / "s2.ckpt", "--data", workdir / "data", "--out", tmp_path / "f.csv") == 0
        assert (tmp_path / "e.csv").read_bytes() == (tmp_path / "f.csv").read_bytes()

    def test_identity_bypass(self, workdir, tmp_path):
        assert run("eval", "--ckpt", workdir / "s1.ckpt", "--data", workdir / "data", "--out", tmp_path / "e.csv",
                   "--mask-ratio", 0, "--identity-bypass") == 0
        for line in (tmp_path / "e.csv").read_text().splitlines()[1:]:
            _, l2, l1 = line.split(",")
            assert abs(float(l2)) <= 1e-9 and abs(float(l1)) <= 1e-9

    def test_bad_ratio(self, workdir, tmp_path):
        assert run("eval", "--ckpt", workdir / "s1.ckpt", "--data", workdir / "data", "--out", tmp_path / "e.csv",
                   "--mask-ratio", 1.5) == 2

    def test_corrupt_checkpoint(self, workdir, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"NOPE" + bytes(20))
        assert run("eval", "--ckpt", tmp_path / "bad.ckpt", "--data", workdir / "data", "--out", tmp_path / "e") == 2


def test_tokenize(workdir, tmp_path):
    assert run("tokenize", "--cloud", workdir / "data" / "cube_0001.xyz", "--config", "tiny",
               "--centers", tmp_path / "c.xyz", "--groups", tmp_path / "g.csv") == 0
    assert len(load_xyz(tmp_path / "c.xyz")) == 16
    assert len((tmp_path / "g.csv").read_text().splitlines()) == 1 + 16 * 8


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "pointfill", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("pointfill ")
