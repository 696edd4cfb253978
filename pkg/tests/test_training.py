import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from statetrack.errors import ConfigError, NumericError
from statetrack.groups import build_group
from statetrack.training import (
    AdamState, Curriculum, LRSchedule, RunRecord, TrainConfig, adamw_step, evaluate_lengths, grid_best, grid_cells,
    load_run, max_passing_length, run_grid, save_run, stage_lengths, train_curriculum,
)

TINY = dict(d_model=8, d_state=4, n_train=64, n_test=32, n_eval=32, batch_size=32, L_max=4, eval_lengths=(8, 16))


def _rec(mp, acc, seed=0):
    return RunRecord({}, seed, "converged", [], [], acc, {}, {}, mp)


# ---------------------------------------------------------------- curriculum


def test_stage_lengths_cap():
    assert stage_lengths(2, 60) == [2, 4, 8, 16, 32, 60]
    assert stage_lengths(2, 32) == [2, 4, 8, 16, 32]
    assert stage_lengths(3, 3) == [3]


def test_promotion_after_five_epochs():
    cur = Curriculum(TrainConfig(L_max=60, eval_lengths=(100,)), 1 / 6)
    events = [cur.observe(0.96) for _ in range(5)]
    assert events == ["continue"] * 4 + ["promote"]
    assert cur.length == 4
    assert cur.stages[0].length == 2 and cur.stages[0].epochs == 5 and cur.stages[0].promoted


def test_streak_resets_below_threshold():
    cur = Curriculum(TrainConfig(), 0.5)
    for a in (0.96, 0.97, 0.99, 0.96, 0.94, 0.96, 0.96, 0.96, 0.96):
        assert cur.observe(a) == "continue"
    assert cur.observe(0.96) == "promote"


def test_converges_at_cap():
    cur = Curriculum(TrainConfig(start_len=16, L_max=32), 0.5)
    for _ in range(5):
        ev = cur.observe(1.0)
    assert ev == "promote" and cur.length == 32
    assert [cur.observe(1.0) for _ in range(5)][-1] == "converged"


def test_stall_rule():
    cur = Curriculum(TrainConfig(), 1 / 6)
    events = [cur.observe(1 / 6 + 0.01) for _ in range(50)]
    assert events[-1] == "stalled" and events[:-1] == ["continue"] * 49
    assert cur.stages[-1].promoted is False


# ---------------------------------------------------------------- mp


def test_mp_examples():
    assert max_passing_length({100: 0.99, 200: 0.95, 300: 0.4}, 0.9, True, 60) == 200
    assert max_passing_length({100: 0.5, 200: 0.4}, 0.9, True, 60) == 60
    assert max_passing_length({100: 0.99}, 0.9, False, 60) == 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=4), st.integers(0, 3), st.floats(0, 1))
def test_mp_monotone_in_accuracy(accs, i, bump):
    lengths = [64, 128, 256, 512]
    base = dict(zip(lengths, accs))
    raised = dict(base)
    raised[lengths[i]] = max(base[lengths[i]], bump)
    assert max_passing_length(raised, 0.9, True, 32) >= max_passing_length(base, 0.9, True, 32)


def test_never_promoting_gives_zero():
    cfg = TrainConfig(model="linear_rnn", group="S3", max_total_epochs=2, **TINY)
    rec, _ = train_curriculum(cfg, 0)
    assert rec.status == "budget" and rec.mp == 0
    assert rec.stages[-1].length == 2 and not rec.stages[-1].promoted


def test_evaluate_records_both_metrics():
    cfg = TrainConfig(model="tanh_rnn", group="C2", max_total_epochs=1, **TINY)
    _, stack = train_curriculum(cfg, 0)
    tok, fin, mp = evaluate_lengths(stack, build_group("C2"), (8, 16), 40, converged=True, L_max=4)
    assert set(tok) == set(fin) == {8, 16}
    assert all(0 <= v <= 1 for v in list(tok.values()) + list(fin.values()))
    assert mp in (4, 8, 16)


# ---------------------------------------------------------------- optimiser


def test_adamw_zero_grad_no_decay_is_identity():
    p = {"w": np.array([1.0, -2.0])}
    out = adamw_step(p, {"w": np.zeros(2)}, 1e-2, 0.0, AdamState.zeros_like(p))
    assert np.array_equal(out["w"], p["w"])


def test_adamw_decoupled_decay():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    lr, wd = 1e-2, 0.01
    out = adamw_step(p, {"w": np.zeros(3)}, lr, wd, AdamState.zeros_like(p))
    assert np.abs(out["w"] - p["w"] * (1 - lr * wd)).max() <= 1e-16


def test_adamw_first_step_value():
    p = {"w": np.array([1.0])}
    out = adamw_step(p, {"w": np.array([0.5])}, 0.1, 0.01, AdamState.zeros_like(p))
    # bias-corrected first step: lr * g / (|g| + eps) plus decay
    assert abs(out["w"][0] - 0.899000002) <= 1e-15


def test_adamw_quadratic_converges():
    p = {"x": np.array([0.0])}
    s = AdamState.zeros_like(p)
    for _ in range(500):
        p = adamw_step(p, {"x": 2 * (p["x"] - 3.0)}, 0.05, 0.0, s)
    assert abs(p["x"][0] - 3.0) <= 1e-6


def test_adamw_rejects_mismatch_and_nonfinite():
    p = {"w": np.ones(2)}
    with pytest.raises(ValueError):
        adamw_step(p, {"v": np.ones(2)}, 0.1, 0.0, AdamState.zeros_like(p))
    with pytest.raises(NumericError):
        adamw_step(p, {"w": np.array([np.nan, 0.0])}, 0.1, 0.0, AdamState.zeros_like(p))


# ---------------------------------------------------------------- schedules


def test_fixed_schedule():
    s = LRSchedule("fixed", 3e-3, 100)
    assert {s.lr(e) for e in range(100)} == {3e-3}


def test_cosine_schedule_endpoints():
    s = LRSchedule("cosine", 1e-3, 200)
    assert s.lr(0) == pytest.approx(1e-3, abs=1e-18)
    assert s.lr(200) == pytest.approx(1e-5, abs=1e-18)
    assert s.lr(100) == pytest.approx(0.5 * (1e-3 + 1e-5), abs=1e-18)
    assert all(s.lr(e) >= s.lr(e + 1) for e in range(200))


def test_plateau_schedule():
    s = LRSchedule("plateau", 1e-3, 100, patience=5)
    s.observe(0.5)
    halved = [s.observe(0.5) for _ in range(5)]
    assert halved == [False] * 4 + [True]
    assert s.lr(0) == 5e-4
    for _ in range(200):
        s.observe(0.1)
    assert s.lr(0) == pytest.approx(1e-6, abs=1e-20)
    assert not LRSchedule("fixed", 1e-3, 10).observe(0.0)
    with pytest.raises(ConfigError):
        LRSchedule("warmup", 1e-3, 10)


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(L_max=64, eval_lengths=(64, 128))
    with pytest.raises(ConfigError):
        TrainConfig(eval_lengths=(128, 64))
    with pytest.raises(ConfigError):
        TrainConfig(promote_threshold=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(scheduler="linear")


def test_paper_profile_values():
    c = TrainConfig.paper()
    assert (c.d_model, c.batch_size, c.weight_decay, c.L_max) == (698, 256, 0.01, 60)
    assert c.eval_lengths == tuple(range(100, 1001, 100))
    assert (c.n_train, c.n_test) == (10000, 2000)


def test_desk_defaults():
    c = TrainConfig.desk()
    assert (c.d_model, c.L_max, c.eval_lengths, c.batch_size) == (64, 32, (64, 128, 256, 512), 128)
    assert (c.promote_threshold, c.promote_patience, c.pass_threshold) == (0.95, 5, 0.90)


# ---------------------------------------------------------------- records and grid


def test_training_is_reproducible(tmp_path):
    cfg = TrainConfig(model="tanh_rnn", group="C2", max_total_epochs=4, **TINY)
    a, sa = train_curriculum(cfg, 3)
    b, sb = train_curriculum(cfg, 3)
    assert a.to_json() == b.to_json()
    assert a.epochs_csv() == b.epochs_csv()
    for k in sa.params:
        assert sa.params[k].tobytes() == sb.params[k].tobytes()
    save_run(tmp_path / "r", a, sa)
    back = load_run(tmp_path / "r")
    assert back.to_json() == a.to_json()
    assert "wall_time" not in json.loads((tmp_path / "r" / "record.json").read_text())
    assert (tmp_path / "r" / "timing.txt").is_file()


def test_grid_best_lexicographic():
    assert grid_best([_rec(100, 0.99), _rec(100, 0.995)]) == 1
    assert grid_best([_rec(200, 0.5), _rec(100, 0.995)]) == 0
    assert grid_best([_rec(100, 0.99, 0), _rec(100, 0.99, 1)]) == 0
    assert grid_best([_rec(0, 0.0)]) == 0
    with pytest.raises(ValueError):
        grid_best([])


def test_grid_records_failed_cells(tmp_path):
    base = TrainConfig(model="tanh_rnn", group="C2", max_total_epochs=2, activation="groupsort2", **TINY)
    cells = grid_cells(base, [4, 3], [1e-3], ["fixed"], [0])
    res = run_grid(cells, jobs=2, out_dir=tmp_path)
    assert [r.status for r in res.records][1] == "error"
    assert "ConfigError" in res.records[1].notes["error"]
    assert res.records[0].status != "error"
    assert res.best_index == 0
    assert len(list(tmp_path.glob("cell-*"))) == 2


def test_grid_parallel_matches_serial():
    base = TrainConfig(model="tanh_rnn", group="C2", max_total_epochs=2, **TINY)
    cells = grid_cells(base, [4], [1e-3, 3e-3], ["fixed"], [0, 1])
    a = run_grid(cells, jobs=1)
    b = run_grid(cells, jobs=2)
    assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)
    assert len(a.records) == 4


@pytest.mark.slow
def test_desk_grid_runtime():
    import time

    base = TrainConfig.desk(model="tanh_rnn", group="C2", lr=3e-3)
    cells = grid_cells(base, [16, 32], [1e-3, 3e-3], ["fixed"], [0, 1])
    t = time.perf_counter()
    res = run_grid(cells, jobs=1)
    assert time.perf_counter() - t < 600
    assert len(res.records) == 8
    assert res.best.mp >= 64
