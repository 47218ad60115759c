from pathlib import Path

import numpy as np
import pytest

from pointfill.dataset import (
    MaskSpec, apply_mask, build_dataset, load_dataset, load_pgm, load_ply, load_xyz,
    make_sample, pairing_is_exact, read_manifest, render_projection, save_pgm, save_ply,
    save_xyz, synth_shape,
)
from pointfill.errors import ConfigError, ParseError
from pointfill.geometry import tokenize_cloud

DATA = Path(__file__).parent / "data"


class TestXyz:
    def test_round_trip(self, tmp_path):
        pts = np.random.default_rng(0).normal(size=(100, 3))
        save_xyz(tmp_path / "c.xyz", pts)
        np.testing.assert_allclose(load_xyz(tmp_path / "c.xyz"), pts, rtol=0, atol=1e-9)

    def test_short_line(self, tmp_path):
        (tmp_path / "bad.xyz").write_text("0 0 0\n1 2\n")
        with pytest.raises(ParseError, match="line 2") as err:
            load_xyz(tmp_path / "bad.xyz")
        assert err.value.line == 2

    def test_empty(self, tmp_path):
        (tmp_path / "e.xyz").write_text("")
        with pytest.raises(ParseError, match="empty cloud"):
            load_xyz(tmp_path / "e.xyz")

    @pytest.mark.parametrize("bad", ["nan 0 0", "0 inf 0", "0 0 -inf"])
    def test_non_finite(self, tmp_path, bad):
        (tmp_path / "n.xyz").write_text(f"0 0 0\n{bad}\n")
        with pytest.raises(ParseError, match="line 2"):
            load_xyz(tmp_path / "n.xyz")


class TestPly:
    def test_fixture(self):
        pts = load_ply(DATA / "triangle.ply")
        np.testing.assert_array_equal(pts, [[0, 0, 0], [1, 0, 0], [0, 2, 0.5]])

    def test_round_trip(self, tmp_path):
        pts = np.random.default_rng(1).normal(size=(50, 3))
        save_ply(tmp_path / "c.ply", pts)
        np.testing.assert_allclose(load_ply(tmp_path / "c.ply"), pts, rtol=0, atol=1e-9)

    def test_binary_rejected(self, tmp_path):
        (tmp_path / "b.ply").write_bytes(
            b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\n"
            b"property float y\nproperty float z\nend_header\n" + b"\0" * 12)
        with pytest.raises(ParseError, match="unsupported encoding"):
            load_ply(tmp_path / "b.ply")

    def test_wrong_magic(self, tmp_path):
        (tmp_path / "x.ply").write_text("plx\nformat ascii 1.0\nend_header\n")
        with pytest.raises(ParseError, match="magic"):
            load_ply(tmp_path / "x.ply")

    def test_missing_header_end(self, tmp_path):
        (tmp_path / "x.ply").write_text("ply\nformat ascii 1.0\nelement vertex 1\n")
        with pytest.raises(ParseError):
            load_ply(tmp_path / "x.ply")

    def test_nan_rejected(self, tmp_path):
        (tmp_path / "n.ply").write_text(
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n"
            "property float z\nend_header\nnan 0 0\n")
        with pytest.raises(ParseError, match="non-finite"):
            load_ply(tmp_path / "n.ply")


class TestPgm:
    def test_round_trip(self, tmp_path):
        img = np.random.default_rng(2).integers(0, 256, size=(12, 16)) / 255.0
        save_pgm(tmp_path / "i.pgm", img)
        np.testing.assert_array_equal(load_pgm(tmp_path / "i.pgm"), img)
        assert (tmp_path / "i.pgm").read_bytes().startswith(b"P5\n16 12\n255\n")


class TestSynth:
    @pytest.mark.parametrize("n", [2, 3, 7, 100, 1001])
    def test_sphere_on_unit_sphere(self, n):
        pts = synth_shape("sphere", n, seed=4)
        assert pts.shape == (n, 3)
        np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-6)

    def test_cube_stratified(self):
        k = 25
        pts = synth_shape("cube", 6 * k, seed=5)
        axis = np.argmax(np.abs(pts), axis=1)
        sign = np.sign(pts[np.arange(len(pts)), axis])
        faces = [(a, s) for a in range(3) for s in (1, -1)]
        assert [int(np.sum((axis == a) & (sign == s))) for a, s in faces] == [k] * 6

    @pytest.mark.parametrize("kind", ["sphere", "cube", "torus", "plane_with_hole"])
    def test_deterministic_and_normalized(self, kind):
        a, b = synth_shape(kind, 300, seed=9), synth_shape(kind, 300, seed=9)
        assert a.tobytes() == b.tobytes()
        assert np.linalg.norm(a, axis=1).max() == pytest.approx(1.0)
        np.testing.assert_allclose(a.mean(axis=0), 0.0, atol=1e-12)

    def test_unknown(self):
        with pytest.raises(ConfigError):
            synth_shape("teapot", 10, 0)


class TestRender:
    def test_single_point_center(self):
        img = render_projection(np.zeros((1, 3)), 16, 16, "+z")
        assert np.count_nonzero(img) == 1
        assert img[8, 8] > 0

    def test_occlusion(self):
        near, far = [0.0, 0.0, 0.5], [0.0, 0.0, -0.5]
        img = render_projection(np.array([far, near]), 16, 16, "+z")
        assert img[8, 8] == pytest.approx(1.0 / (2.0 - 0.5))
        img = render_projection(np.array([far, near]), 16, 16, "-z")
        assert img[8, 8] == pytest.approx(1.0 / (2.0 - 0.5))

    def test_sphere_disc(self):
        pts = synth_shape("sphere", 20000, seed=1)
        img = render_projection(pts, 32, 32, "+z")
        disc = np.pi * 16 ** 2
        assert abs(np.count_nonzero(img) - disc) / disc < 0.10

    def test_range(self):
        img = render_projection(synth_shape("torus", 500, 2), 24, 24, "+x")
        assert img.min() >= 0 and img.max() <= 1

    def test_too_small(self):
        with pytest.raises(ConfigError):
            render_projection(np.zeros((1, 3)), 7, 16)


class TestMask:
    def grouped(self, g=10):
        return tokenize_cloud(synth_shape("sphere", 200, 0), g, 4)

    def test_ratio_zero(self):
        m = apply_mask(self.grouped(), MaskSpec(0.0, 1))
        assert len(m.visible_idx) == 10 and len(m.masked_idx) == 0

    def test_six_of_ten(self):
        m = apply_mask(self.grouped(), MaskSpec(0.6, 1))
        assert len(m.masked_idx) == 6 and len(m.visible_idx) == 4
        assert sorted(m.masked_idx.tolist() + m.visible_idx.tolist()) == list(range(10))

    def test_two_thirds_gives_triple(self):
        grouped = tokenize_cloud(synth_shape("sphere", 600, 0), 63, 5)
        m = apply_mask(grouped, MaskSpec(2 / 3, 3))
        assert len(m.masked_idx) == 42 and len(m.visible_idx) == 21
        assert grouped.num_groups * grouped.group_size == 3 * m.num_visible_points

    def test_invalid_ratio(self):
        with pytest.raises(ConfigError):
            MaskSpec(1.0, 0)

    def test_determinism_and_spread(self):
        spec = lambda s: tuple(MaskSpec(0.5, s).masked_indices(16).tolist())
        assert spec(7) == spec(7)
        assert len({spec(s) for s in range(100)}) > 90


class TestDatasetFiles:
    def test_build_and_load(self, tmp_path):
        rows = build_dataset(tmp_path, ["sphere"], n=256, count=4, seed=3, image_size=16)
        assert len(rows) == 4
        assert len(list(tmp_path.glob("*.xyz"))) == 4 and len(list(tmp_path.glob("*.pgm"))) == 4
        assert len(read_manifest(tmp_path / "manifest.txt")) == 4
        ds = load_dataset(tmp_path)
        assert all(pairing_is_exact(s) for s in ds)

    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        build_dataset(a, ["sphere", "torus"], n=128, count=3, seed=1, image_size=16)
        build_dataset(b, ["sphere", "torus"], n=128, count=3, seed=1, image_size=16)
        names = sorted(p.name for p in a.iterdir())
        assert names == sorted(p.name for p in b.iterdir())
        assert all((a / n).read_bytes() == (b / n).read_bytes() for n in names)

    def test_sample_pairing(self):
        assert pairing_is_exact(make_sample("s", "cube", 500, 2, 32, "-y"))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="manifest"):
            load_dataset(tmp_path)
