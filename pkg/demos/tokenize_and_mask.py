"""Walk one synthetic cloud through normalization, FPS, KNN grouping and masking.

Run: python3 demos/tokenize_and_mask.py
"""
import numpy as np

from pointfill.config import load_preset
from pointfill.dataset import MaskSpec, apply_mask, make_sample
from pointfill.model import group_in_frame

cfg = load_preset("tiny")
sample = make_sample("torus_0000", "torus", 1024, seed=0, image_size=cfg.image_size)
print(f"cloud: {len(sample.cloud)} points, image {sample.image.shape}")

grouped, centroid, scale = group_in_frame(sample.cloud, cfg)
print(f"normalized with centroid {np.round(centroid, 4)} and scale {scale:.4f}")
print(f"{grouped.num_groups} groups of {grouped.group_size} points")
radii = np.linalg.norm(grouped.groups, axis=-1).max(axis=1)
print(f"group radius: min {radii.min():.3f}, max {radii.max():.3f}")

masked = apply_mask(grouped, MaskSpec(cfg.mask_ratio, seed=4))
print(f"mask ratio {cfg.mask_ratio:.3f}: {len(masked.visible_idx)} visible, {len(masked.masked_idx)} hidden")
print("visible groups:", masked.visible_idx.tolist())
