"""Image tokens: non-overlapping patches, a linear patch embedding with learned
(row, col) positions, and a small pre-norm transformer encoder.

There is no class token; the encoder emits exactly one token per patch,
and the patch grid is sized so that count equals the number of point groups.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import Linear, Module, Parameter, TransformerBlock, run_blocks


@dataclass
class PatchGrid:
    patches: np.ndarray   # (B, G, p*p), row-major patch order
    patch_size: int
    grid: int

    @property
    def num_patches(self):
        return self.grid * self.grid


def patchify(image, g) -> PatchGrid:
    """Cut an (H, W) or (B, H, W) image into ``g`` square patches."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[None]
    b, h, w = img.shape
    side = math.isqrt(g)
    if side * side != g:
        lo, hi = side * side, (side + 1) ** 2
        raise ConfigError(f"patch count {g} is not a perfect square (try {lo} or {hi})")
    if h != w:
        raise ConfigError(f"image must be square, got {h}x{w}")
    if h % side:
        valid = [d * d for d in range(1, h + 1) if h % d == 0]
        raise ConfigError(f"image side {h} is not divisible by sqrt({g})={side}; "
                          f"patch counts that fit: {valid}")
    p = h // side
    patches = img.reshape(b, side, p, side, p).transpose(0, 1, 3, 2, 4).reshape(b, g, p * p)
    return PatchGrid(patches, p, side)


class ImageTokenizer(Module):
    def __init__(self, cfg, rng, dtype=np.float32):
        self.num_patches = cfg.num_groups
        self.patch_size = cfg.patch_size
        self.patch_embed = Linear(self.patch_size ** 2, cfg.token_size, rng, dtype)
        self.pos_embed = Parameter(rng.normal(0.0, cfg.init_embedding_std,
                                              size=(cfg.num_groups, cfg.token_size)), dtype=dtype)
        self.blocks = [TransformerBlock(cfg.token_size, cfg.heads, rng, dtype)
                       for _ in range(cfg.image_depth)]
        self.patch_dropout = cfg.patch_dropout if cfg.image_encoder == "vitmae" else 0.0

    def embed(self, grid: PatchGrid):
        if grid.patches.shape[-1] != self.patch_embed.weight.shape[0]:
            raise ConfigError(f"patch vectors of length {grid.patches.shape[-1]} do not fit the "
                              f"embedding for {self.patch_size}x{self.patch_size} patches")
        if grid.num_patches != self.num_patches:
            raise ConfigError(f"{grid.num_patches} patches, model expects {self.num_patches}")
        x = T.Tensor(grid.patches, dtype=self.pos_embed.dtype)
        tokens = self.patch_embed(x)
        return T.add(tokens, T.expand(self.pos_embed, tokens.shape))

    def encode(self, tokens):
        return run_blocks(tokens, self.blocks)

    def drop_patches(self, grid: PatchGrid, rng):
        """Blank a random subset of patches (masked-image pretext).

        Blanked patches keep their slot, so the token count is unchanged.
        """
        b, g, _ = grid.patches.shape
        k = int(math.floor(self.patch_dropout * g + 0.5))
        patches = grid.patches.copy()
        for i in range(b):
            patches[i, rng.permutation(g)[:k]] = 0.0
        return PatchGrid(patches, grid.patch_size, grid.grid)

    def __call__(self, images, training=False, rng=None):
        grid = patchify(images, self.num_patches)
        if training and self.patch_dropout > 0 and rng is not None:
            grid = self.drop_patches(grid, rng)
        return self.encode(self.embed(grid))
