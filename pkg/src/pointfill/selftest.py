"""Fast invariant suite behind ``pointfill selftest``.

Each check returns ``(passed, detail)``; failures are reported, not raised.
"""
from __future__ import annotations

import contextlib
import time

import numpy as np

from . import tensor as T
from .chamfer import chamfer, chamfer_loss
from .config import load_preset
from .dataset import make_sample
from .geometry import fps
from .model import Batch, CrossModalReconstructor, prepare_sample
from .training import StagePlan, run_schedule, start_state, train_step

GRAD_TOL = 1e-4
# step ladder for piecewise-smooth losses; see finite_diff_check
MODEL_STEPS = (1e-6, 1e-5, 1e-7)


def greedy_fps(points, g, start=0):
    """Textbook farthest point sampling, written independently of ``fps``."""
    pts = np.asarray(points, dtype=np.float64)
    chosen = [start]
    for _ in range(g - 1):
        best, best_d = -1, -1.0
        for i in range(len(pts)):
            if i in chosen:
                continue
            d = min(float(np.sum((pts[i] - pts[j]) ** 2)) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return np.array(chosen)


def op_gradient_cases(seed=7):
    """(name, loss builder, params) covering every differentiable op, in wide precision."""
    rng = np.random.default_rng(seed)

    def r(*shape, low=None):
        data = rng.normal(size=shape) if low is None else rng.uniform(low, 2.0, size=shape)
        return T.Tensor(data, requires_grad=True, dtype=np.float64)

    def const(*shape):
        return T.Tensor(rng.normal(size=shape), dtype=np.float64)

    sq = lambda x: T.tsum(T.power(x, 2))
    cases = []
    a, b = r(2, 3, 4), r(4, 3)
    cases.append(("matmul", lambda: sq(T.matmul(a, b)), [a, b]))
    x, w, bias = r(2, 5, 4), r(4, 3), r(3)
    cases.append(("linear", lambda: sq(T.linear(x, w, bias)), [x, w, bias]))
    s, gs = r(3, 4), const(3, 4)
    cases.append(("softmax", lambda: T.tsum(T.mul(T.softmax(s, axis=-1), gs)), [s]))
    s0 = r(3, 4)
    cases.append(("softmax_axis0", lambda: T.tsum(T.mul(T.softmax(s0, axis=0), gs)), [s0]))
    ln_x, ln_g, ln_b, g6 = r(3, 6), r(6), r(6), const(3, 6)
    cases.append(("layernorm", lambda: T.tsum(T.mul(T.layernorm(ln_x, ln_g, ln_b), g6)), [ln_x, ln_g, ln_b]))
    ge = r(10)
    cases.append(("gelu", lambda: sq(T.gelu(ge)), [ge]))
    # keep relu inputs away from the kink at zero
    re = T.Tensor(rng.uniform(0.1, 1.0, size=8) * rng.choice([-1, 1], size=8), requires_grad=True, dtype=np.float64)
    cases.append(("relu", lambda: sq(T.relu(re)), [re]))
    u, v = r(3, 2), r(3, 2, low=0.5)
    cases.append(("add_sub_mul_div", lambda: T.tsum(T.div(T.mul(T.add(u, v), T.sub(u, v)), v)), [u, v]))
    n = r(4)
    cases.append(("neg_power", lambda: T.tsum(T.power(T.neg(n), 3)), [n]))
    e = r(4)
    cases.append(("exp_log", lambda: T.tsum(T.log(T.add(T.exp(e), 1.0))), [e]))
    m = r(2, 5, 3)
    cases.append(("amax", lambda: sq(T.amax(m, axis=1)), [m]))
    t = r(2, 3, 4)
    cases.append(("reshape_transpose", lambda: T.tsum(T.power(T.reshape(T.transpose(t, (2, 0, 1)), (4, 6)), 3)), [t]))
    ex = r(1, 4)
    cases.append(("expand", lambda: sq(T.expand(ex, (3, 4))), [ex]))
    c1, c2 = r(2, 3), r(2, 1)
    cases.append(("concat", lambda: sq(T.concat([c1, c2], axis=1)), [c1, c2]))
    tk = r(5, 3)
    cases.append(("take", lambda: sq(T.take(tk, [4, 0, 4], axis=0)), [tk]))
    ga = r(2, 4, 3)
    cases.append(("gather", lambda: sq(T.gather(ga, [[3, 3, 0], [1, 2, 0]])), [ga]))
    mn = r(3, 4)
    cases.append(("mean", lambda: sq(T.mean(mn, axis=1)), [mn]))
    cp = r(1, 16, 3)
    targets = [rng.normal(size=(16, 3))]
    cases.append(("chamfer_l2sq", lambda: chamfer_loss(cp, targets, "l2sq"), [cp]))
    cases.append(("chamfer_l1", lambda: chamfer_loss(cp, targets, "l1"), [cp]))
    return cases


def tiny_batch(cfg, n=256):
    sample = make_sample("sphere_0000", "sphere", n, 0, cfg.image_size)
    return sample, Batch.collate([prepare_sample(sample, cfg, 1)])


def model_gradient_report(seed=0, coords=3):
    """Spot-check ``coords`` random coordinates of every tiny-model parameter tensor."""
    cfg = load_preset("tiny").replace(precision="wide")
    with T.precision("wide"):
        model = CrossModalReconstructor(cfg, seed=seed)
        _, batch = tiny_batch(cfg)
        return T.finite_diff_check(lambda: model.loss(model(batch, stage=3), batch), model.parameters(),
                                   h=MODEL_STEPS, coords=coords, rng=np.random.default_rng(seed))


def stage_two_changes(steps=10):
    """Names changed by ``steps`` stage-2 updates after a stage-1 epoch, and the expected set."""
    cfg = load_preset("tiny")
    model = CrossModalReconstructor(cfg)
    sample, _ = tiny_batch(cfg)
    stage1 = start_state(model, 1)
    run_schedule([sample], stage1, 1)
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    state = start_state(model, 2, resume=stage1.checkpoint())
    for _ in range(steps):
        train_step(model, [sample], StagePlan(2), state.adam, state.rng)
    changed = {n for n, p in model.named_parameters() if not np.array_equal(before[n], p.data)}
    return changed, set(StagePlan(2).trainable_names(model))


# -- checks ----------------------------------------------------------------

def check_fps():
    rng = np.random.default_rng(11)
    for _ in range(20):
        pts = rng.normal(size=(int(rng.integers(8, 96)), 3))
        g = int(rng.integers(1, min(16, len(pts)) + 1))
        if not np.array_equal(fps(pts, g), greedy_fps(pts, g)):
            return False, f"fps differs from greedy reference on a {len(pts)}-point cloud, g={g}"
    return True, "20 clouds match the greedy reference"


def check_chamfer():
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(20):
        a = rng.normal(size=(int(rng.integers(1, 400)), 3))
        b = rng.normal(size=(int(rng.integers(1, 400)), 3))
        for variant in ("l2sq", "l1"):
            kd, bf = chamfer(a, b, variant, "kdtree"), chamfer(a, b, variant, "brute")
            if not (np.array_equal(kd.nearest_forward, bf.nearest_forward)
                    and np.array_equal(kd.nearest_backward, bf.nearest_backward)):
                return False, "kd-tree and brute-force nearest indices differ"
            worst = max(worst, abs(kd.loss - bf.loss))
    return worst <= 1e-9, f"20 pairs, max loss difference {worst:.1e}"


def check_op_gradients():
    worst_name, worst = None, 0.0
    with T.precision("wide"):
        for name, f, params in op_gradient_cases():
            report = T.finite_diff_check(f, params, h=1e-6)
            if report.max_rel_error >= worst:
                worst_name, worst = name, report.max_rel_error
    return worst <= GRAD_TOL, f"{len(op_gradient_cases())} ops, max rel err {worst:.2e} ({worst_name})"


def check_model_gradients():
    report = model_gradient_report()
    return report.passed(GRAD_TOL), str(report)


def check_freeze():
    changed, expected = stage_two_changes()
    if changed != expected:
        extra, missing = sorted(changed - expected), sorted(expected - changed)
        return False, f"unexpected changes {extra[:3]}, unchanged trainables {missing[:3]}"
    return True, f"exactly the {len(expected)} stage-2 tensors changed"


CHECKS = [
    ("fps_oracle", check_fps),
    ("chamfer_kdtree_vs_brute", check_chamfer),
    ("op_gradients", check_op_gradients),
    ("model_gradients", check_model_gradients),
    ("freeze_soundness", check_freeze),
]
FAULTS = ("matmul_sign",)


def run(out=print, fault=None):
    """Run every check, print one line each, and return True iff all pass."""
    ctx = T.inject_fault(fault) if fault else contextlib.nullcontext()
    ok = True
    with ctx:
        for name, check in CHECKS:
            start = time.perf_counter()
            try:
                passed, detail = check()
            except Exception as exc:                    # reported, not raised
                passed, detail = False, f"{type(exc).__name__}: {exc}"
            ok &= passed
            out(f"{'PASS' if passed else 'FAIL'} {name}: {detail} [{time.perf_counter() - start:.1f}s]")
    return ok
