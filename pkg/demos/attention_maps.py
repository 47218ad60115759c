"""Export cross-attention weights after a short stage-2 run and print the
strongest image patch for each point token.

Run: python3 demos/attention_maps.py
"""
import tempfile
from pathlib import Path

import numpy as np

from pointfill import tensor as T
from pointfill.ca_decoder import export_attention, load_attention, mean_attention
from pointfill.config import load_preset
from pointfill.dataset import make_sample
from pointfill.model import Batch, CrossModalReconstructor, prepare_sample
from pointfill.training import run_schedule, start_state

cfg = load_preset("tiny")
sample = make_sample("cube_0000", "cube", 512, 0, cfg.image_size)
model = CrossModalReconstructor(cfg)
stage1 = start_state(model, 1)
run_schedule([sample], stage1, 10)
stage2 = start_state(model, 2, resume=stage1.checkpoint())
run_schedule([sample], stage2, 10)

batch = Batch.collate([prepare_sample(sample, cfg, 0)])
with T.no_grad():
    recon = model(batch, stage=2, keep_attention=True)

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "cube.attn"
    export_attention(recon.fused, path)
    print(path.read_text().splitlines()[0])
    mats = load_attention(path)

avg = mean_attention(mats)
print(f"rows sum to 1: max deviation {np.abs(avg.sum(-1) - 1).max():.1e}")
grid = cfg.grid
for token, row in enumerate(avg):
    patch = int(np.argmax(row))
    print(f"point token {token:2d} -> patch ({patch // grid}, {patch % grid}) weight {row[patch]:.3f}")
