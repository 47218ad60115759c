"""Point tokens from grouped clouds.

Each center-relative group goes through a shared per-point MLP and a
channel-wise max-pool (so the embedding ignores point order), then a
projection to the token size.  A center embedding is added to every token.
Only visible groups enter the encoder; masked groups are represented by a
shared learned mask token plus their center embedding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module, Parameter, TransformerBlock, run_blocks


class GroupEmbedder(Module):
    def __init__(self, width, rng, dtype=np.float32):
        self.fc1 = Linear(3, 64, rng, dtype)
        self.fc2 = Linear(64, 128, rng, dtype)
        self.proj = Linear(128, width, rng, dtype)

    def point_features(self, groups):
        """Per-point features before pooling, shape (..., M, 128)."""
        return self.fc2(T.relu(self.fc1(groups)))

    def __call__(self, groups):
        """(..., M, 3) -> (..., C)."""
        return self.proj(T.amax(self.point_features(groups), axis=-2))


class CenterEmbedding(Module):
    def __init__(self, width, rng, dtype=np.float32):
        self.fc1 = Linear(3, 128, rng, dtype)
        self.fc2 = Linear(128, width, rng, dtype)

    def __call__(self, centers):
        return self.fc2(T.gelu(self.fc1(centers)))


@dataclass
class PointTokens:
    tokens: T.Tensor          # (B, G_vis, C)
    mask_queries: T.Tensor    # (B, G_mask, C)
    visible_idx: np.ndarray   # (B, G_vis)
    masked_idx: np.ndarray    # (B, G_mask)

    def in_group_order(self):
        """Visible encodings and mask queries interleaved back into group order."""
        joined = T.concat([self.tokens, self.mask_queries], axis=1)
        order = np.concatenate([self.visible_idx, self.masked_idx], axis=1)
        return T.gather(joined, np.argsort(order, axis=1, kind="stable"))


class PointEncoder(Module):
    def __init__(self, cfg, rng, dtype=np.float32):
        self.embed = GroupEmbedder(cfg.token_size, rng, dtype)
        self.pos = CenterEmbedding(cfg.token_size, rng, dtype)
        self.mask_token = Parameter(rng.normal(0.0, cfg.init_embedding_std, size=cfg.token_size), dtype=dtype)
        self.blocks = [TransformerBlock(cfg.token_size, cfg.heads, rng, dtype)
                       for _ in range(cfg.encoder_depth)]

    def _const(self, x):
        return T.Tensor(x, dtype=self.mask_token.dtype)

    def embed_visible(self, groups, centers):
        """Token embedding plus center embedding, before the encoder."""
        return T.add(self.embed(self._const(groups)), self.pos(self._const(centers)))

    def mask_queries(self, masked_centers):
        pos = self.pos(self._const(masked_centers))
        return T.add(T.expand(self.mask_token, pos.shape), pos)

    def encode(self, tokens):
        return run_blocks(tokens, self.blocks)

    def __call__(self, groups, centers, visible_idx, masked_idx) -> PointTokens:
        """``groups`` (B, G, M, 3) and ``centers`` (B, G, 3) are plain arrays.

        Masked groups' points are never read.
        """
        rows = np.arange(groups.shape[0])[:, None]
        vis = self.encode(self.embed_visible(groups[rows, visible_idx], centers[rows, visible_idx]))
        queries = self.mask_queries(centers[rows, masked_idx])
        return PointTokens(vis, queries, visible_idx, masked_idx)
