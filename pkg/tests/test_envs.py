import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from harmask.data import TaskDataset, load_jsonl, save_jsonl
from harmask.envs import (EvalReport, PointTaskSpec, clamp_action, env_step, expert_mean_return,
                          expert_policy, gen_dataset, rollout, success_threshold)
from harmask.errors import ConfigError
from harmask.model import build_layout

from conftest import tiny_config


def test_step_rewards():
    d0 = PointTaskSpec("d", "dir", angle=0.0)
    _, r = env_step(d0, np.zeros(4), np.array([1.0, 0.0]))
    assert r == 1.0
    _, r = env_step(d0, np.zeros(4), np.array([-1.0, 0.0]))
    assert r == -1.0
    v = PointTaskSpec("v", "vel", target_speed=0.5)
    _, r = env_step(v, np.zeros(4), np.array([0.3, 0.4]))
    assert r == pytest.approx(0.0, abs=1e-15)


def test_step_dynamics():
    spec = PointTaskSpec("d", "dir")
    nxt, _ = env_step(spec, np.array([1.0, 2.0, 0.0, 0.0]), np.array([3.0, 4.0]))
    # (3, 4) is projected to the unit ball before it becomes the velocity
    np.testing.assert_allclose(nxt, [1.06, 2.08, 0.6, 0.8])


def test_spec_validation():
    with pytest.raises(ConfigError):
        PointTaskSpec("x", "jump")
    with pytest.raises(ConfigError):
        PointTaskSpec("x", "vel", target_speed=2.0)


def test_gen_dataset_deterministic(tmp_path):
    spec = PointTaskSpec("d", "dir", angle=1.0, horizon=10)
    a = gen_dataset(spec, 6, "near_optimal", [1, 2])
    b = gen_dataset(spec, 6, "near_optimal", [1, 2])
    save_jsonl([a], tmp_path / "a.jsonl")
    save_jsonl([b], tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    (back,) = load_jsonl(tmp_path / "a.jsonl")
    assert len(back.trajectories) == 6


def test_expert_return_near_bound():
    spec = PointTaskSpec("d", "dir", angle=0.3, horizon=50)
    ret = expert_mean_return(spec)
    # per-step reward is bounded by action_bound; the expert should get most of it
    assert ret >= 0.9 * spec.horizon * spec.action_bound


def test_sub_optimal_is_worse():
    spec = PointTaskSpec("d", "dir", angle=2.0)
    near = gen_dataset(spec, 100, "near_optimal", 0)
    sub = gen_dataset(spec, 100, "sub_optimal", 0)
    mean = lambda ds: np.mean([t.total_return for t in ds.trajectories])
    assert mean(sub) < mean(near)


def test_rollout_zero_theta():
    cfg = tiny_config(context_K=3, prompt_Kstar=2)
    spec = PointTaskSpec("d", "dir", horizon=10)
    ds = gen_dataset(spec, 4, "near_optimal", 0)
    rep = rollout(np.zeros(build_layout(cfg).total), cfg, None, spec, ds, 10.0, 5, 0)
    assert rep.mean_return == 0.0 and rep.success_rate == 0.0
    assert len(rep.per_episode_returns) == 5


def test_rollout_scripted_expert_succeeds():
    cfg = tiny_config()
    for spec in (PointTaskSpec("d", "dir", angle=2.5, horizon=20),
                 PointTaskSpec("v", "vel", target_speed=0.4, horizon=20)):
        ds = gen_dataset(spec, 4, "near_optimal", 0)
        rep = rollout(None, cfg, None, spec, ds, expert_mean_return(spec), 16, 3,
                      policy=expert_policy(spec))
        assert rep.success_rate == 1.0


def test_rollout_no_episodes():
    cfg = tiny_config()
    spec = PointTaskSpec("d", "dir", horizon=5)
    ds = gen_dataset(spec, 2, "near_optimal", 0)
    rep = rollout(np.zeros(build_layout(cfg).total), cfg, None, spec, ds, 1.0, 0, 0)
    assert rep.episodes == 0 and rep.success_rate == 0.0 and rep.per_episode_returns == []


def test_rollout_is_seeded(tiny_theta):
    cfg = tiny_config()
    spec = PointTaskSpec("d", "dir", horizon=8)
    ds = gen_dataset(spec, 3, "near_optimal", 0)
    a = rollout(tiny_theta, cfg, None, spec, ds, 5.0, 3, 42)
    b = rollout(tiny_theta, cfg, None, spec, ds, 5.0, 3, 42)
    assert a.per_episode_returns == b.per_episode_returns


def test_threshold_sign_handling():
    assert success_threshold(50.0) == pytest.approx(40.0)
    assert success_threshold(-10.0) == pytest.approx(-12.0)


def test_report_invariants():
    rep = EvalReport("t", 2, 1.5, 0.5, [1.0, 2.0], 1.2).to_dict()
    assert rep["schema_version"] == 1
    assert rep["mean_return"] == np.mean(rep["per_episode_returns"])


@settings(max_examples=50, deadline=None)
@given(ax=st.floats(-10, 10), ay=st.floats(-10, 10), angle=st.floats(0, 2 * math.pi),
       bound=st.floats(0.1, 3), kind=st.sampled_from(["dir", "vel"]))
def test_reward_bounded_property(ax, ay, angle, bound, kind):
    spec = PointTaskSpec("p", kind, angle=angle, target_speed=bound / 2, action_bound=bound)
    _, r = env_step(spec, np.zeros(4), np.array([ax, ay]))
    assert -bound - 1e-12 <= r <= bound + 1e-12
    assert np.linalg.norm(clamp_action(spec, np.array([ax, ay]))) <= bound * (1 + 1e-12)
