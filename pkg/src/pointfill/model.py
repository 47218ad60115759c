"""The full reconstruction model and per-sample preparation.

Preparation (normalization, FPS, KNN, masking) is plain numpy; the learned
part runs on the gradient tape:

    point tokens -> [cross-attention to image tokens] -> decoder -> head
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .ca_decoder import CADecoder, FusedTokens, assemble
from .chamfer import chamfer_loss
from .config import ModelConfig
from .dataset import MaskSpec, Sample, apply_mask
from .errors import ConfigError, ContractError
from .geometry import GroupedPointCloud, normalize_unit_sphere, tokenize_cloud
from .image_tokenizer import ImageTokenizer
from .nn import Module
from .pc_encoder import PointEncoder


@dataclass
class PreparedSample:
    id: str
    centers: np.ndarray       # (G, 3)
    groups: np.ndarray        # (G, M, 3), center-relative
    image: np.ndarray         # (H, W)
    visible_idx: np.ndarray
    masked_idx: np.ndarray

    @property
    def num_visible_points(self):
        return len(self.visible_idx) * self.groups.shape[1]


def group_in_frame(cloud, cfg: ModelConfig):
    """Normalize to the unit sphere and group; also return the (centroid, scale) frame."""
    pts, centroid, scale = normalize_unit_sphere(cloud)
    if len(pts) < max(cfg.num_groups, cfg.group_size):
        raise ConfigError(f"cloud has {len(pts)} points; need at least num_groups={cfg.num_groups} "
                          f"and group_size={cfg.group_size}")
    return tokenize_cloud(pts, cfg.num_groups, cfg.group_size, start_index=cfg.fps_start), centroid, scale


def group_cloud(cloud, cfg: ModelConfig) -> GroupedPointCloud:
    return group_in_frame(cloud, cfg)[0]


def check_image(image, cfg: ModelConfig, sample_id="image"):
    if image.shape != (cfg.image_size, cfg.image_size):
        h, w = image.shape
        if h == w and h % cfg.grid:
            raise ConfigError(f"{sample_id}: image side {h} is not divisible by sqrt(num_groups)={cfg.grid}")
        raise ConfigError(f"{sample_id}: image is {h}x{w}, config expects {cfg.image_size}x{cfg.image_size}")


def prepare_sample(sample: Sample, cfg: ModelConfig, mask_seed, grouped=None, mask_ratio=None) -> PreparedSample:
    check_image(sample.image, cfg, sample.id)
    grouped = grouped if grouped is not None else group_cloud(sample.cloud, cfg)
    ratio = cfg.mask_ratio if mask_ratio is None else mask_ratio
    masked = apply_mask(grouped, MaskSpec(ratio, int(mask_seed)))
    return PreparedSample(sample.id, grouped.centers, grouped.groups, sample.image,
                          masked.visible_idx, masked.masked_idx)


@dataclass
class Batch:
    ids: list
    centers: np.ndarray
    groups: np.ndarray
    images: np.ndarray
    visible_idx: np.ndarray
    masked_idx: np.ndarray

    @classmethod
    def collate(cls, items):
        if not items:
            raise ContractError("empty batch")
        return cls([s.id for s in items],
                   np.stack([s.centers for s in items]),
                   np.stack([s.groups for s in items]),
                   np.stack([s.image for s in items]),
                   np.stack([s.visible_idx for s in items]),
                   np.stack([s.masked_idx for s in items]))

    def __len__(self):
        return len(self.ids)

    def absolute_groups(self):
        return self.groups + self.centers[:, :, None, :]

    def targets(self, scope="full"):
        """Ground truth per sample: all groups, or only the masked ones."""
        absolute = self.absolute_groups()
        if scope == "full":
            return [a.reshape(-1, 3) for a in absolute]
        return [absolute[b, self.masked_idx[b]].reshape(-1, 3) for b in range(len(self))]

    @property
    def num_visible_points(self):
        return self.visible_idx.shape[1] * self.groups.shape[2]


@dataclass
class Reconstruction:
    points: T.Tensor           # (B, G*M, 3) absolute
    offsets: T.Tensor          # (B, G, M, 3) relative to centers
    fused: FusedTokens | None

    def masked_points(self, batch: Batch):
        rows = np.arange(len(batch))[:, None]
        offs = T.gather(self.offsets, batch.masked_idx)
        centers = batch.centers[rows, batch.masked_idx]
        return assemble(offs, centers)


class CrossModalReconstructor(Module):
    def __init__(self, cfg: ModelConfig, seed=None):
        self.config = cfg
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        dtype = T.PRECISIONS[cfg.precision]
        self.pc_encoder = PointEncoder(cfg, rng, dtype)
        self.image_tokenizer = ImageTokenizer(cfg, rng, dtype)
        self.ca_decoder = CADecoder(cfg, rng, dtype)

    @property
    def dtype(self):
        return T.PRECISIONS[self.config.precision]

    def forward(self, batch: Batch, stage=3, training=False, rng=None, keep_attention=False,
                identity_bypass=False) -> Reconstruction:
        """Reconstruct every group of every sample in ``batch``.

        Stage 1 skips the image branch entirely (fusion bypassed); stages 2
        and 3 fuse image tokens through cross-attention.
        """
        if identity_bypass:
            # debug path: ground truth passed straight through, kept in 64-bit so it is exact
            offsets = T.Tensor(batch.groups, dtype=np.float64)
            return Reconstruction(assemble(offsets, batch.centers), offsets, None)
        pts = self.pc_encoder(batch.groups, batch.centers, batch.visible_idx, batch.masked_idx)
        tokens = pts.in_group_order()
        image_tokens = None
        if stage >= 2:
            image_tokens = self.image_tokenizer(batch.images, training=training, rng=rng)
        fused = self.ca_decoder.fuse_and_decode(tokens, image_tokens, keep_weights=keep_attention)
        offsets = self.ca_decoder.reconstruct(fused)
        return Reconstruction(assemble(offsets, batch.centers), offsets, fused)

    __call__ = forward

    def loss(self, recon: Reconstruction, batch: Batch, variant=None, scope=None):
        variant = variant or self.config.variant
        scope = scope or self.config.loss_scope
        if scope == "masked":
            if batch.masked_idx.shape[1] == 0:
                raise ConfigError("loss_scope=masked needs mask_ratio > 0")
            pred = recon.masked_points(batch)
        else:
            pred = recon.points
        return chamfer_loss(pred, batch.targets(scope), variant)
