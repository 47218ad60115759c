import numpy as np
import pytest

from pointfill import tensor as T
from pointfill import training
from pointfill.checkpoint import load_checkpoint, snapshot
from pointfill.config import load_preset
from pointfill.dataset import make_sample
from pointfill.errors import ConfigError, ContractError, NumericalError
from pointfill.model import CrossModalReconstructor
from pointfill.training import (LOG_HEADER, StagePlan, TrainLog, evaluate, param_group, read_log, run_schedule,
                               smoothed_fraction_nonincreasing, start_state, train_step, upsampling_applies)


@pytest.fixture(scope="module")
def tiny():
    return load_preset("tiny")


@pytest.fixture(scope="module")
def data(tiny):
    return [make_sample(f"{k}_{i:04d}", k, 256, i, tiny.image_size) for i, k in enumerate(["sphere", "torus"])]


def values(model):
    return {n: p.data.copy() for n, p in model.named_parameters()}


def changed(before, model):
    return {n for n, p in model.named_parameters() if not np.array_equal(before[n], p.data)}


@pytest.fixture(scope="module")
def overfit(tiny, data):
    model = CrossModalReconstructor(tiny)
    state = start_state(model, 3)
    log = run_schedule(data[:1], state, 200)
    return model, log


class TestStagePlan:
    def test_groups(self, tiny):
        model = CrossModalReconstructor(tiny)
        names = [n for n, _ in model.named_parameters()]
        s1 = set(StagePlan(1).trainable_names(model))
        s2 = set(StagePlan(2).trainable_names(model))
        assert s1 | s2 == set(names) and not s1 & s2
        assert set(StagePlan(3).trainable_names(model)) == set(names)
        assert {param_group(n) for n in s1} == {"pc_encoder", "decoder"}
        assert {param_group(n) for n in s2} == {"image_tokenizer", "cross_attention"}
        assert "ca_decoder.head.conv1.weight" in s1 and "ca_decoder.cross.0.attn.q.weight" in s2

    def test_invalid_stage(self):
        with pytest.raises(ConfigError):
            StagePlan(4)

    def test_unknown_parameter(self):
        with pytest.raises(ContractError):
            param_group("mystery.weight")


class TestTrainStep:
    def test_zero_learning_rate(self, tiny, data):
        model = CrossModalReconstructor(tiny.replace(lr=0.0))
        before = values(model)
        loss = train_step(model, data[:1], StagePlan(3), training.new_optimizer(model.config), np.random.default_rng(0))
        assert np.isfinite(loss) and changed(before, model) == set()

    def test_stage_two_keeps_point_encoder(self, tiny, data):
        model = CrossModalReconstructor(tiny)
        before = values(model)
        train_step(model, data, StagePlan(2), training.new_optimizer(tiny), np.random.default_rng(0))
        diff = changed(before, model)
        assert diff and not any(n.startswith("pc_encoder.") for n in diff)

    def test_stage_one_keeps_image_branch(self, tiny, data):
        model = CrossModalReconstructor(tiny)
        before = values(model)
        state = start_state(model, 1)
        run_schedule(data, state, 2)
        diff = changed(before, model)
        assert diff == set(StagePlan(1).trainable_names(model))

    def test_freeze_soundness_over_ten_steps(self, tiny, data):
        model = CrossModalReconstructor(tiny)
        run_schedule(data, start_state(model, 1), 1)
        before = values(model)
        state = start_state(model, 2, resume=snapshot(model, 1))
        for _ in range(10):
            train_step(model, data[:1], StagePlan(2), state.adam, state.rng)
        assert changed(before, model) == set(StagePlan(2).trainable_names(model))

    def test_non_finite_loss_is_diagnosed(self, tiny, data):
        model = CrossModalReconstructor(tiny)
        model.pc_encoder.embed.fc1.weight.data[0, 0] = np.nan
        with pytest.raises(NumericalError, match="tape node 0"):
            train_step(model, data[:1], StagePlan(1), training.new_optimizer(tiny), np.random.default_rng(0))
        assert len(T.current_tape()) == 0

    def test_empty_batch(self, tiny):
        with pytest.raises(ContractError):
            train_step(CrossModalReconstructor(tiny), [], StagePlan(1), training.new_optimizer(tiny), np.random.default_rng(0))


class TestSchedule:
    def test_zero_epochs(self, tiny, data, tmp_path):
        model = CrossModalReconstructor(tiny)
        init = values(model)
        log = TrainLog()
        log.start(tmp_path / "log.csv")
        run_schedule(data, start_state(model, 1, log=log), 0, log, tmp_path / "c.ckpt")
        assert (tmp_path / "log.csv").read_text() == LOG_HEADER + "\n"
        ckpt = load_checkpoint(tmp_path / "c.ckpt")
        assert ckpt.epoch == 0 and all(np.array_equal(ckpt.params[n], v) for n, v in init.items())

    def test_log_lines(self, tiny, data, tmp_path):
        log = TrainLog()
        log.start(tmp_path / "log.csv")
        run_schedule(data, start_state(CrossModalReconstructor(tiny), 1, log=log), 3, log)
        rows = read_log(tmp_path / "log.csv")
        assert [(e, s) for e, s, _ in rows] == [(1, 1), (2, 1), (3, 1)]
        assert [l for _, _, l in rows] == log.losses

    def test_stage_two_without_checkpoint_warns(self, tiny):
        log = TrainLog()
        start_state(CrossModalReconstructor(tiny), 2, log=log)
        assert log.warnings == ["stage 2 started without a stage-1 checkpoint"]
        assert log.text().splitlines()[1].startswith("# warning:")

    def test_no_going_back(self, tiny):
        model = CrossModalReconstructor(tiny)
        with pytest.raises(ConfigError, match="stage 3"):
            start_state(model, 1, resume=snapshot(model, 3))
        assert start_state(model, 1, resume=snapshot(model, 3), allow_stage_regression=True).stage == 1

    def test_periodic_checkpoints(self, tiny, data, tmp_path, monkeypatch):
        saved = []
        monkeypatch.setattr(training, "save_checkpoint", lambda path, ckpt: saved.append(ckpt.epoch))
        run_schedule(data[:1], start_state(CrossModalReconstructor(tiny), 1), 5, checkpoint_path=tmp_path / "c", checkpoint_every=2)
        assert saved == [2, 4, 5]

    def test_resume_same_stage_continues_optimizer(self, tiny, data):
        model = CrossModalReconstructor(tiny)
        state = start_state(model, 1)
        run_schedule(data, state, 1)
        resumed = start_state(CrossModalReconstructor(tiny, seed=9), 1, resume=state.checkpoint())
        # two samples at batch size 1: two optimizer steps in one epoch
        assert resumed.adam.step == state.adam.step == 2 and resumed.epoch == 1
        fresh = start_state(CrossModalReconstructor(tiny, seed=9), 2, resume=state.checkpoint())
        assert fresh.adam.step == 0 and fresh.epoch == 0

    def test_reproducible(self, tiny, data):
        runs = [run_schedule(data, start_state(CrossModalReconstructor(tiny), 3), 2).losses for _ in range(2)]
        assert runs[0] == runs[1]


class TestOverfit:
    def test_loss_drops_tenfold(self, overfit):
        _, log = overfit
        assert len(log.losses) == 200
        assert log.losses[-1] <= 0.1 * log.losses[0]

    def test_smoothed_series_mostly_decreases(self, overfit):
        _, log = overfit
        assert smoothed_fraction_nonincreasing(log.losses, 10) >= 0.9

    def test_overfit_beats_untrained(self, overfit, tiny, data):
        model, _ = overfit
        trained = evaluate(data[:1], model).mean_l2sq
        untrained = evaluate(data[:1], CrossModalReconstructor(tiny)).mean_l2sq
        assert trained < untrained


class TestEvaluate:
    def test_identity_bypass_is_zero(self, tiny, data):
        report = evaluate(data, CrossModalReconstructor(tiny), mask_ratio=0.0, identity_bypass=True)
        assert all(r.chamfer_l2sq == 0.0 and r.chamfer_l1 == 0.0 for r in report.rows)

    def test_deterministic(self, tiny, data):
        model = CrossModalReconstructor(tiny)
        assert evaluate(data, model).to_csv() == evaluate(data, model).to_csv()

    def test_csv(self, tiny, data):
        csv = evaluate(data, CrossModalReconstructor(tiny)).to_csv().splitlines()
        assert csv[0] == "sample_id,chamfer_l2sq,chamfer_l1" and len(csv) == 3
        assert csv[1].startswith("sphere_0000,")

    def test_threefold_upsampling(self):
        cfg = load_preset("upsample")
        assert upsampling_applies(cfg, cfg.mask_ratio)
        samples = [make_sample(f"s{i}", "cube", 512, i, cfg.image_size) for i in range(2)]
        for row in evaluate(samples, CrossModalReconstructor(cfg)).rows:
            assert row.recon_points == 3 * row.visible_points == 36 * 8

    def test_upsampling_needs_divisible_groups(self, tiny):
        assert not upsampling_applies(tiny, tiny.mask_ratio)
        assert not upsampling_applies(load_preset("upsample"), 0.5)


def test_smoothing_statistic():
    assert smoothed_fraction_nonincreasing(np.arange(30)[::-1]) == 1.0
    assert smoothed_fraction_nonincreasing(np.arange(30)) == 0.0
    assert smoothed_fraction_nonincreasing([1.0, 2.0]) == 1.0
