import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from harmask.config import TrainConfig
from harmask.errors import CheckpointError, NumericError
from harmask.params import MaskSet
from harmask.trainer import (METRICS_COLUMNS, Trainer, TrainState, alpha_schedule, audit_jsonl,
                             checkpoint_digest, inner_step, load_checkpoint, metrics_csv,
                             save_checkpoint)

SMALL_MODEL = dict(n_layers=1, n_heads=2, embed_dim=8, context_K=3, prompt_Kstar=2,
                   max_timestep=16, dropout=0.0)


def small_config(**kw):
    base = dict(E=60, t_m=20, log_every=10, eta=1e-3, eta_max=8, batch_size=4, stat_batch_size=8,
                probe_batch_size=4, variant="F", model=SMALL_MODEL)
    base.update(kw)
    return TrainConfig(**base)


def two_param_state(mask):
    return TrainState(np.array([1.0, 2.0]), MaskSet({"t": np.asarray(mask, bool)}, 0.0),
                      np.zeros(2), np.zeros(2))


def test_alpha_examples():
    assert [alpha_schedule(t, 1000, 0, 100) for t in (250, 500, 750, 1000)] == [50, 100, 50, 0]
    assert alpha_schedule(10, 10, 3, 40) == 3
    assert alpha_schedule(5, 10, 3, 40) == 40
    with pytest.raises(ValueError):
        alpha_schedule(0, 10, 0, 1)


@settings(max_examples=80, deadline=None)
@given(E=st.integers(1, 5000), lo=st.integers(0, 50), span=st.integers(0, 500), data=st.data())
def test_alpha_bounds_and_symmetry(E, lo, span, data):
    hi = lo + span
    t = data.draw(st.integers(1, E))
    a = alpha_schedule(t, E, lo, hi)
    assert lo <= a <= hi
    if t < E:
        assert a == alpha_schedule(E - t, E, lo, hi)


def test_sgd_steps():
    cfg = TrainConfig(optimizer="sgd", eta=0.1)
    st0 = inner_step(two_param_state([0, 0]), cfg, "t", None, grad=np.array([1.0, 1.0]),
                     loss_value=1.0)
    assert st0.theta.tolist() == [1.0, 2.0]
    st1 = inner_step(two_param_state([1, 1]), cfg, "t", None, grad=np.array([1.0, 0.0]),
                     loss_value=1.0)
    assert st1.theta.tolist() == [0.9, 2.0]
    st2 = inner_step(two_param_state([1, 0]), cfg, "t", None, grad=np.array([1.0, 5.0]),
                     loss_value=1.0)
    assert st2.theta[1] == 2.0


def test_adam_stale_moments_do_not_move_inactive():
    cfg = TrainConfig(eta=0.1)
    st_ = two_param_state([1, 1])
    inner_step(st_, cfg, "t", None, grad=np.array([1.0, 1.0]), loss_value=1.0)
    st_.masks = MaskSet({"t": np.array([True, False])}, 0.0)
    before = st_.theta[1]
    inner_step(st_, cfg, "t", None, grad=np.array([1.0, 1.0]), loss_value=1.0)
    assert st_.theta[1] == before
    assert st_.m[1] != 0.0  # moment decays but the coordinate stays


def test_non_finite_loss_raises():
    with pytest.raises(NumericError):
        inner_step(two_param_state([1, 1]), TrainConfig(), "t", None, grad=np.ones(2),
                   loss_value=float("nan"))


def test_no_update_before_first_interval(small_datasets):
    tr = Trainer(small_config(variant="M"), small_datasets)
    init = tr.state.masks.copy()
    tr.run(until=tr.config.t_m - 1)
    assert tr.state.audit == []
    for t in init.task_ids:
        assert np.array_equal(init[t], tr.state.masks[t])


def test_variant_none_keeps_full_masks(small_datasets):
    tr = Trainer(small_config(variant="none", S=0.5), small_datasets)
    tr.run()
    assert all(m.all() for m in tr.state.masks.masks.values())
    assert tr.state.audit == []


def test_variant_r_keeps_initial_masks(small_datasets):
    tr = Trainer(small_config(variant="R"), small_datasets)
    init = tr.state.masks.copy()
    tr.run()
    for t in init.task_ids:
        assert np.array_equal(init[t], tr.state.masks[t])


def test_mask_update_count_and_partition(small_datasets):
    tr = Trainer(small_config(variant="F"), small_datasets)
    steps = []
    tr.step_hook = lambda s, task, before, after: steps.append(s.round + 1)
    tr.run()
    rounds = sorted({r.round for r in tr.state.audit})
    assert rounds == [20, 40, 60]
    assert len(tr.state.audit) == 3 * len(small_datasets)
    assert sorted(steps + rounds) == list(range(1, 61))


def test_metrics_rows(small_datasets):
    tr = Trainer(small_config(), small_datasets)
    tr.run()
    rows = tr.state.metrics
    assert {r["round"] for r in rows} == {10, 20, 30, 40, 50, 60}
    alls = [r for r in rows if r["task_id"] == "all"]
    assert all(-1 <= r["avg_harmony_masked"] <= 1 for r in alls)
    text = metrics_csv(rows)
    assert text.splitlines()[0] == ",".join(METRICS_COLUMNS)
    assert len(text.splitlines()) == len(rows) + 1


def test_deterministic_checkpoints(small_datasets, tmp_path):
    for name in ("a", "b"):
        tr = Trainer(small_config(), small_datasets)
        tr.run()
        save_checkpoint(tr.state, tr.config, tmp_path / name)
    assert checkpoint_digest(tmp_path / "a") == checkpoint_digest(tmp_path / "b")


def test_checkpoint_roundtrip_fixed_point(small_datasets, tmp_path):
    tr = Trainer(small_config(), small_datasets)
    tr.run(until=30)
    save_checkpoint(tr.state, tr.config, tmp_path / "one")
    state, cfg = load_checkpoint(tmp_path / "one")
    save_checkpoint(state, cfg, tmp_path / "two")
    for f in ("manifest.json", "state.bin"):
        assert (tmp_path / "one" / f).read_bytes() == (tmp_path / "two" / f).read_bytes()


def test_truncated_checkpoint_rejected(small_datasets, tmp_path):
    tr = Trainer(small_config(), small_datasets)
    save_checkpoint(tr.state, tr.config, tmp_path / "c")
    blob = tmp_path / "c" / "state.bin"
    blob.write_bytes(blob.read_bytes()[:-5])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")


def test_resume_matches_uninterrupted(small_datasets, tmp_path):
    full = Trainer(small_config(variant="M"), small_datasets)
    full.run()
    part = Trainer(small_config(variant="M"), small_datasets)
    part.run(until=25)
    save_checkpoint(part.state, part.config, tmp_path / "mid")
    state, cfg = load_checkpoint(tmp_path / "mid")
    resumed = Trainer(cfg, small_datasets, state=state)
    resumed.run()
    save_checkpoint(full.state, full.config, tmp_path / "full")
    save_checkpoint(resumed.state, resumed.config, tmp_path / "resumed")
    assert checkpoint_digest(tmp_path / "full") == checkpoint_digest(tmp_path / "resumed")


def test_threads_do_not_change_results(small_datasets, tmp_path):
    a = Trainer(small_config(), small_datasets)
    a.run()
    b = Trainer(small_config(threads=3), small_datasets)
    b.run()
    assert np.array_equal(a.state.theta, b.state.theta)
    assert audit_jsonl(a.state.audit) == audit_jsonl(b.state.audit)


def test_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(E=10, t_m=20)
    with pytest.raises(ValueError):
        TrainConfig(E=100, t_m=30, log_every=20)
    with pytest.raises(ValueError):
        TrainConfig(eta_min=5, eta_max=2)
    assert TrainConfig().resolved_eta_max(250_000) == math.ceil(2.5)
