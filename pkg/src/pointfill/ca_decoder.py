"""Fusion and reconstruction: point tokens attend to image tokens, a
self-attention decoder refines the fused tokens, and a two-layer per-token
head turns each token into M offsets around its group center.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, ParseError
from .nn import LayerNorm, Linear, Module, MultiHeadAttention, TransformerBlock, run_blocks


def cross_attention(point_tokens, image_tokens, attn: MultiHeadAttention):
    """Queries from point tokens, keys and values from image tokens.

    Returns the attention output before any residual, and the (B, heads,
    G, G) weights.
    """
    if point_tokens.ndim != 3 or image_tokens.ndim != 3:
        raise DimensionError("cross_attention expects (B, G, C) token arrays")
    if point_tokens.shape != image_tokens.shape:
        raise DimensionError(f"point tokens {point_tokens.shape} and image tokens {image_tokens.shape} differ")
    out = attn(point_tokens, image_tokens)
    return out, attn.last_weights


class CrossAttentionBlock(Module):
    """x + cross_attention(norm(x), norm(image))."""

    def __init__(self, width, heads, rng, dtype=np.float32):
        self.norm_q = LayerNorm(width, dtype)
        self.norm_kv = LayerNorm(width, dtype)
        self.attn = MultiHeadAttention(width, heads, rng, dtype)

    def __call__(self, x, image_tokens):
        out, weights = cross_attention(self.norm_q(x), self.norm_kv(image_tokens), self.attn)
        return T.add(x, out), weights


@dataclass
class FusedTokens:
    tokens: T.Tensor
    attn_weights: list | None = None   # per layer, (B, heads, G, G)


def decode(tokens, blocks):
    return run_blocks(tokens, blocks)


class ReconstructionHead(Module):
    """Two kernel-size-1 convolutions with a ReLU between: C -> 2C -> M*3."""

    def __init__(self, width, group_size, rng, dtype=np.float32):
        self.group_size = group_size
        self.conv1 = Linear(width, 2 * width, rng, dtype)
        self.conv2 = Linear(2 * width, group_size * 3, rng, dtype)

    def __call__(self, tokens):
        b, g, _ = tokens.shape
        out = self.conv2(T.relu(self.conv1(tokens)))
        return T.reshape(out, (b, g, self.group_size, 3))


def assemble(offsets, centers):
    """Relative (B, G, M, 3) offsets + (B, G, 3) centers -> (B, G*M, 3) points."""
    b, g, m, _ = offsets.shape
    c = T.Tensor(np.broadcast_to(np.asarray(centers)[:, :, None, :], (b, g, m, 3)), dtype=offsets.dtype)
    return T.reshape(T.add(offsets, c), (b, g * m, 3))


class CADecoder(Module):
    """Cross-attention fusion, self-attention decoder, and reconstruction head.

    With ``cross_attention="before"`` one fusion block runs ahead of the
    decoder stack; with ``"interleaved"`` a fusion block precedes every
    decoder block.
    """

    def __init__(self, cfg, rng, dtype=np.float32):
        n_cross = cfg.decoder_depth if cfg.cross_attention == "interleaved" else 1
        self.interleaved = cfg.cross_attention == "interleaved"
        self.cross = [CrossAttentionBlock(cfg.token_size, cfg.heads, rng, dtype) for _ in range(n_cross)]
        self.blocks = [TransformerBlock(cfg.token_size, cfg.heads, rng, dtype) for _ in range(cfg.decoder_depth)]
        self.norm = LayerNorm(cfg.token_size, dtype)
        self.head = ReconstructionHead(cfg.token_size, cfg.group_size, rng, dtype)

    def fuse_and_decode(self, tokens, image_tokens=None, keep_weights=False) -> FusedTokens:
        """``image_tokens=None`` bypasses fusion (point-only pretraining)."""
        weights = [] if keep_weights else None
        if image_tokens is None:
            return FusedTokens(decode(tokens, self.blocks), None)
        if self.interleaved:
            for cross, block in zip(self.cross, self.blocks):
                tokens, w = cross(tokens, image_tokens)
                tokens = block(tokens)
                if keep_weights:
                    weights.append(w)
        else:
            for cross in self.cross:
                tokens, w = cross(tokens, image_tokens)
                if keep_weights:
                    weights.append(w)
            tokens = decode(tokens, self.blocks)
        return FusedTokens(tokens, weights)

    def reconstruct(self, fused: FusedTokens):
        return self.head(self.norm(fused.tokens))


# -- attention export ------------------------------------------------------

ATTN_MAGIC = "ATTN v1"


def export_attention(fused: FusedTokens, path, batch_index=0):
    """Write per-layer, per-head G x G weight matrices for one batch item."""
    if fused.attn_weights is None:
        raise ContractError("attention export was not enabled for this forward pass")
    if not fused.attn_weights:
        raise ContractError("no cross-attention layers ran (point-only stage)")
    mats = np.stack([w[batch_index] for w in fused.attn_weights]).astype(np.float64)
    write_attention(path, mats)
    return mats


def write_attention(path, mats):
    layers, heads, g, g2 = mats.shape
    with open(path, "w") as fh:
        fh.write(f"{ATTN_MAGIC} layers={layers} heads={heads} G={g}\n")
        for row in mats.reshape(-1, g2):
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_attention(path):
    """Parse an attention file into a (layers, heads, G, G) array."""
    with open(path) as fh:
        header = fh.readline().split()
        if header[:2] != ATTN_MAGIC.split():
            raise ParseError(f"missing {ATTN_MAGIC!r} header", 1)
        try:
            fields = dict(item.split("=") for item in header[2:])
            layers, heads, g = int(fields["layers"]), int(fields["heads"]), int(fields["G"])
        except (KeyError, ValueError):
            raise ParseError("malformed header fields", 1) from None
        rows = []
        for lineno, line in enumerate(fh, 2):
            if line.strip():
                values = line.split()
                if len(values) != g:
                    raise ParseError(f"expected {g} values, got {len(values)}", lineno)
                rows.append([float(v) for v in values])
    if len(rows) != layers * heads * g:
        raise ParseError(f"expected {layers * heads * g} rows, got {len(rows)}")
    return np.array(rows).reshape(layers, heads, g, g)


def mean_attention(mats):
    """Average over layers and heads: the single G x G map used for plotting."""
    return np.asarray(mats).mean(axis=(0, 1))
