import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointfill import tensor as T
from pointfill.config import ModelConfig
from pointfill.errors import ConfigError
from pointfill.image_tokenizer import ImageTokenizer, PatchGrid, patchify


def small_cfg(**kw):
    base = dict(token_size=16, num_groups=4, group_size=4, image_size=8, heads=2,
                encoder_depth=1, image_depth=2, decoder_depth=1)
    base.update(kw)
    return ModelConfig(**base)


class TestPatchify:
    def test_base_geometry(self):
        grid = patchify(np.zeros((64, 64)), 64)
        assert grid.patch_size == 8 and grid.grid == 8
        assert grid.patches.shape == (1, 64, 64)

    def test_first_patch_holds_top_left_block(self):
        img = np.arange(64, dtype=float).reshape(8, 8)
        grid = patchify(img, 4)
        assert grid.patch_size == 4
        np.testing.assert_array_equal(grid.patches[0, 0], img[0:4, 0:4].ravel())
        # row-major: patch 1 is top-right, patch 2 bottom-left
        np.testing.assert_array_equal(grid.patches[0, 1], img[0:4, 4:8].ravel())
        np.testing.assert_array_equal(grid.patches[0, 2], img[4:8, 0:4].ravel())

    def test_non_square_count(self):
        with pytest.raises(ConfigError, match="49 or 64"):
            patchify(np.zeros((64, 64)), 60)

    def test_non_divisible_side(self):
        with pytest.raises(ConfigError, match="patch counts that fit"):
            patchify(np.zeros((60, 60)), 64)

    def test_non_square_image(self):
        with pytest.raises(ConfigError):
            patchify(np.zeros((8, 16)), 4)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 2))
    def test_tiles_without_overlap(self, side, p, b):
        img = np.random.default_rng(side * 10 + p).random((b, side * p, side * p))
        grid = patchify(img, side * side)
        # every pixel appears exactly once
        assert np.array_equal(np.sort(grid.patches.reshape(b, -1), axis=1), np.sort(img.reshape(b, -1), axis=1))
        back = grid.patches.reshape(b, side, side, p, p).transpose(0, 1, 3, 2, 4).reshape(img.shape)
        np.testing.assert_array_equal(back, img)


class TestEmbed:
    def test_zero_image_gives_positions(self):
        tok = ImageTokenizer(small_cfg(), np.random.default_rng(0))
        tok.patch_embed.bias.data[:] = 0
        out = tok.embed(patchify(np.zeros((2, 8, 8)), 4))
        assert out.shape == (2, 4, 16)
        np.testing.assert_array_equal(out.data[0], tok.pos_embed.data)
        np.testing.assert_array_equal(out.data[1], tok.pos_embed.data)

    def test_locality(self):
        tok = ImageTokenizer(small_cfg(), np.random.default_rng(0))
        a = np.random.default_rng(1).random((8, 8))
        b = a.copy()
        b[4:8, 0:4] += 0.5          # patch 2 only
        ta = tok.embed(patchify(a, 4)).data[0]
        tb = tok.embed(patchify(b, 4)).data[0]
        changed = [i for i in range(4) if not np.array_equal(ta[i], tb[i])]
        assert changed == [2]

    def test_patch_length_mismatch(self):
        tok = ImageTokenizer(small_cfg(), np.random.default_rng(0))
        with pytest.raises(ConfigError):
            tok.embed(PatchGrid(np.zeros((1, 4, 9)), 3, 2))

    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError):
            small_cfg(token_size=10, heads=4)


class TestEncoder:
    def test_depth_zero_is_identity(self):
        tok = ImageTokenizer(small_cfg(image_depth=0), np.random.default_rng(0))
        grid = patchify(np.random.default_rng(2).random((8, 8)), 4)
        np.testing.assert_array_equal(tok.encode(tok.embed(grid)).data, tok.embed(grid).data)

    def test_shape(self):
        cfg = small_cfg(image_depth=4)
        tok = ImageTokenizer(cfg, np.random.default_rng(0))
        assert tok(np.random.default_rng(0).random((3, 8, 8))).shape == (3, 4, 16)

    def test_permutation_equivariance(self):
        with T.precision("wide"):
            tok = ImageTokenizer(small_cfg(), np.random.default_rng(0), np.float64)
            grid = patchify(np.random.default_rng(3).random((8, 8)), 4)
            x = tok.embed(grid)
            perm = np.array([2, 0, 3, 1])
            # tokens carry their own positional embedding, so permuting them permutes the output
            out = tok.encode(x).data
            out_p = tok.encode(T.Tensor(x.data[:, perm])).data
        np.testing.assert_allclose(out_p, out[:, perm], rtol=0, atol=1e-12)

    def test_dropout_only_in_vitmae_training(self):
        rng = np.random.default_rng(0)
        img = np.random.default_rng(4).random((1, 8, 8))
        vit = ImageTokenizer(small_cfg(patch_dropout=0.5), np.random.default_rng(0))
        assert vit.patch_dropout == 0.0
        mae = ImageTokenizer(small_cfg(image_encoder="vitmae", patch_dropout=0.5), np.random.default_rng(0))
        dropped = mae.drop_patches(patchify(img, 4), rng)
        blank = [i for i in range(4) if not dropped.patches[0, i].any()]
        assert len(blank) == 2 and dropped.patches.shape == (1, 4, 16)
        np.testing.assert_array_equal(mae(img).data, mae(img, training=False, rng=rng).data)
