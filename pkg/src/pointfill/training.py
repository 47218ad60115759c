"""Staged training, evaluation, and the parameter-freezing plan.

Stage 1 trains the point encoder and the decoder (self-attention blocks,
final norm, head) with fusion bypassed.  Stage 2 freezes those and trains
the image tokenizer and the cross-attention blocks.  Stage 3 trains
everything.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .chamfer import chamfer
from .checkpoint import Checkpoint, restore, restore_rng, save_checkpoint, snapshot
from .dataset import masked_count, sample_mask_seed
from .errors import ConfigError, ContractError, NumericalError
from .model import Batch, CrossModalReconstructor, group_cloud, prepare_sample

GROUPS = ("pc_encoder", "decoder", "image_tokenizer", "cross_attention")
STAGE_GROUPS = {
    1: frozenset({"pc_encoder", "decoder"}),
    2: frozenset({"image_tokenizer", "cross_attention"}),
    3: frozenset(GROUPS),
}
LOG_HEADER = "epoch,stage,loss"


def param_group(name):
    """Map a parameter name to the module group the stage plan refers to."""
    if name.startswith("pc_encoder."):
        return "pc_encoder"
    if name.startswith("image_tokenizer."):
        return "image_tokenizer"
    if name.startswith("ca_decoder.cross."):
        return "cross_attention"
    if name.startswith("ca_decoder."):
        return "decoder"
    raise ContractError(f"parameter {name} belongs to no stage group")


@dataclass(frozen=True)
class StagePlan:
    stage: int

    def __post_init__(self):
        if self.stage not in STAGE_GROUPS:
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage}")

    @property
    def groups(self):
        return STAGE_GROUPS[self.stage]

    def trainable(self, name):
        return param_group(name) in self.groups

    def trainable_names(self, model):
        return [n for n, _ in model.named_parameters() if self.trainable(n)]

    def apply(self, model):
        """Freeze everything outside this stage's groups."""
        for name, p in model.named_parameters():
            p.requires_grad = self.trainable(name)
        return model


def new_optimizer(cfg) -> T.AdamState:
    return T.AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)


# -- one step --------------------------------------------------------------

class GroupCache:
    """FPS + KNN grouping is deterministic per sample, so compute it once."""

    def __init__(self, cfg):
        self.cfg = cfg
        self._cache = {}

    def __call__(self, sample):
        if sample.id not in self._cache:
            self._cache[sample.id] = group_cloud(sample.cloud, self.cfg)
        return self._cache[sample.id]


def _check_finite(value, what):
    """Abort with the earliest tape node that produced a non-finite value."""
    if np.isfinite(value.data).all():
        return
    tape = T.current_tape()
    hit = tape.first_nonfinite()
    tape.clear()
    where = f"tape node {hit[0]} ({hit[1]})" if hit else "an input to the forward pass"
    raise NumericalError(f"{what} is non-finite; first non-finite value produced at {where}")


def train_step(model: CrossModalReconstructor, samples, plan: StagePlan, adam: T.AdamState, rng, cache=None) -> float:
    """Forward, Chamfer loss, backward, and an Adam update of the trainable set.

    Masks are drawn from ``rng``, so the trajectory is fixed by its seed.
    """
    if not samples:
        raise ContractError("train_step needs a nonempty batch")
    cfg = model.config
    cache = cache or GroupCache(cfg)
    plan.apply(model)
    items = [prepare_sample(s, cfg, int(rng.integers(2 ** 32)), grouped=cache(s)) for s in samples]
    batch = Batch.collate(items)
    T.current_tape().clear()
    recon = model(batch, stage=plan.stage, training=True, rng=rng)
    _check_finite(recon.points, "reconstruction")
    loss = model.loss(recon, batch)
    _check_finite(loss, "loss")
    model.zero_grad()
    loss.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericalError(f"gradient of {name} is non-finite")
    T.adam_step(model.parameters(), adam)
    model.zero_grad()
    return float(loss.item())


# -- schedule --------------------------------------------------------------

@dataclass
class TrainLog:
    lines: list = field(default_factory=lambda: [LOG_HEADER])
    losses: list = field(default_factory=list)
    path: Path | None = None

    def _emit(self, line):
        self.lines.append(line)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")

    def start(self, path):
        self.path = Path(path) if path else None
        if self.path is not None:
            self.path.write_text("\n".join(self.lines) + "\n")

    def record(self, epoch, stage, loss):
        self.losses.append(loss)
        self._emit(f"{epoch},{stage},{loss!r}")

    def warn(self, message):
        self._emit(f"# warning: {message}")

    @property
    def warnings(self):
        return [l[len("# warning: "):] for l in self.lines if l.startswith("# warning: ")]

    def text(self):
        return "\n".join(self.lines) + "\n"


def read_log(path):
    """Parse a training log into (epoch, stage, loss) tuples, skipping comments."""
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#") or line == LOG_HEADER:
            continue
        e, s, l = line.split(",")
        rows.append((int(e), int(s), float(l)))
    return rows


@dataclass
class TrainState:
    model: CrossModalReconstructor
    stage: int
    adam: T.AdamState
    rng: np.random.Generator
    epoch: int = 0

    def checkpoint(self) -> Checkpoint:
        return snapshot(self.model, self.stage, self.epoch, self.adam, self.rng)


def start_state(model, stage, resume: Checkpoint | None = None, rng=None, log: TrainLog | None = None,
                allow_stage_regression=False) -> TrainState:
    """Build the trainer state for ``stage``, optionally continuing ``resume``.

    Moving to a new stage resets the optimizer, since the trainable set
    changes; resuming the same stage continues it.
    """
    StagePlan(stage)
    cfg = model.config
    if resume is None:
        if stage >= 2 and log is not None:
            log.warn(f"stage {stage} started without a stage-{stage - 1} checkpoint")
        return TrainState(model, stage, new_optimizer(cfg), rng or np.random.default_rng(cfg.seed))
    if resume.stage > stage and not allow_stage_regression:
        raise ConfigError(f"checkpoint is from stage {resume.stage}; refusing to go back to stage {stage}")
    if resume.stage < stage - 1 and log is not None:
        log.warn(f"stage {stage} resumed from a stage-{resume.stage} checkpoint")
    restore(model, resume)
    if rng is None:
        rng = restore_rng(resume.rng_state) if resume.rng_state else np.random.default_rng(cfg.seed)
    if resume.stage == stage and resume.adam is not None:
        a = resume.adam
        adam = T.AdamState(cfg.lr, a.beta1, a.beta2, a.eps, a.step,
                           {k: v.copy() for k, v in a.m.items()}, {k: v.copy() for k, v in a.v.items()})
        return TrainState(model, stage, adam, rng, resume.epoch)
    return TrainState(model, stage, new_optimizer(cfg), rng)


def run_schedule(dataset, state: TrainState, epochs, log: TrainLog | None = None, checkpoint_path=None,
                 checkpoint_every=None, on_epoch=None) -> TrainLog:
    """Train ``epochs`` epochs of ``state.stage``.

    Each epoch visits the samples in a fresh random order, in batches of
    ``batch_size``; the logged loss is the mean over that epoch's steps.
    A checkpoint is written every ``checkpoint_every`` epochs and at the end.
    """
    if epochs < 0:
        raise ConfigError("epochs must be non-negative")
    samples = list(dataset)
    if not samples and epochs:
        raise ConfigError("dataset is empty")
    log = log or TrainLog()
    cfg = state.model.config
    every = checkpoint_every or cfg.checkpoint_every
    plan = StagePlan(state.stage)
    cache = GroupCache(cfg)
    for _ in range(epochs):
        order = state.rng.permutation(len(samples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            chunk = [samples[i] for i in order[start:start + cfg.batch_size]]
            losses.append(train_step(state.model, chunk, plan, state.adam, state.rng, cache))
        state.epoch += 1
        log.record(state.epoch, state.stage, float(np.mean(losses)))
        if on_epoch is not None:
            on_epoch(state)
        if checkpoint_path and state.epoch % every == 0:
            save_checkpoint(checkpoint_path, state.checkpoint())
    if checkpoint_path:
        save_checkpoint(checkpoint_path, state.checkpoint())
    return log


def smoothed_fraction_nonincreasing(losses, window=10):
    """Share of consecutive moving-average steps that do not increase."""
    x = np.asarray(losses, dtype=np.float64)
    if len(x) <= window:
        return 1.0
    smooth = np.convolve(x, np.ones(window) / window, mode="valid")
    return float(np.mean(np.diff(smooth) <= 0))


# -- evaluation ------------------------------------------------------------

@dataclass
class EvalRow:
    sample_id: str
    chamfer_l2sq: float
    chamfer_l1: float
    recon_points: int
    visible_points: int


@dataclass
class EvalReport:
    rows: list

    @property
    def mean_l2sq(self):
        return float(np.mean([r.chamfer_l2sq for r in self.rows])) if self.rows else math.nan

    @property
    def mean_l1(self):
        return float(np.mean([r.chamfer_l1 for r in self.rows])) if self.rows else math.nan

    def to_csv(self):
        lines = ["sample_id,chamfer_l2sq,chamfer_l1"]
        lines += [f"{r.sample_id},{r.chamfer_l2sq!r},{r.chamfer_l1!r}" for r in self.rows]
        return "\n".join(lines) + "\n"


def upsampling_applies(cfg, mask_ratio):
    """True when the 2/3 ratio leaves exactly one visible group in three."""
    g = cfg.num_groups
    return abs(mask_ratio - 2 / 3) < 1e-12 and 3 * (g - masked_count(mask_ratio, g)) == g


def evaluate(dataset, model: CrossModalReconstructor, stage=3, mask_ratio=None, identity_bypass=False) -> EvalReport:
    """Per-sample Chamfer (both variants) of the full reconstruction.

    Masks depend only on the sample id and the config seed, so repeated
    evaluations agree exactly.
    """
    cfg = model.config
    ratio = cfg.mask_ratio if mask_ratio is None else mask_ratio
    check_3x = upsampling_applies(cfg, ratio)
    rows = []
    with T.no_grad():
        for sample in dataset:
            prep = prepare_sample(sample, cfg, sample_mask_seed(sample.id, cfg.seed), mask_ratio=ratio)
            batch = Batch.collate([prep])
            recon = model(batch, stage=stage, identity_bypass=identity_bypass)
            pred = recon.points.data[0].astype(np.float64)
            target = batch.targets("full")[0]
            n_vis = batch.num_visible_points
            if check_3x and len(pred) != 3 * n_vis:
                raise ContractError(f"{sample.id}: reconstructed {len(pred)} points from {n_vis} visible; "
                                    f"expected exactly 3x")
            l2 = chamfer(pred, target, "l2sq").loss
            l1 = chamfer(pred, target, "l1").loss
            rows.append(EvalRow(sample.id, float(l2), float(l1), len(pred), n_vis))
    return EvalReport(rows)
