import time

import numpy as np
import pytest

from soil import demos, envs
from soil.demos import DemoFormatError, DemoSet, Trajectory
from soil.envs import EnvSpec


def test_trajectory_length_invariants():
    Trajectory(np.zeros((3, 2)), np.zeros((2, 1)), np.zeros(2))
    with pytest.raises(ValueError):
        Trajectory(np.zeros((3, 2)), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        Trajectory(np.zeros((3, 2)), rewards=np.zeros(3))
    with pytest.raises(ValueError):
        Trajectory(np.array([[0.0, np.inf]]))


def test_demoset_invariants():
    with pytest.raises(ValueError):
        DemoSet((Trajectory(np.zeros((2, 2)), np.zeros((1, 1))),), state_only=True)
    with pytest.raises(ValueError):
        DemoSet((Trajectory(np.zeros((2, 2))), Trajectory(np.zeros((2, 3)))))


def test_expert_grasps_at_object(point_spec):
    s = envs.reset(point_spec, np.random.default_rng(0))
    s.kin = s.obj.copy()
    assert demos.scripted_expert_action(point_spec, s)[-1] == 1.0


def test_expert_at_setpoint_is_quiet(point_spec):
    s = envs.reset(point_spec, np.random.default_rng(0))
    s.kin, s.obj, s.attached = s.goal.copy(), s.goal.copy(), np.array(True)
    a = demos.scripted_expert_action(point_spec, s)
    np.testing.assert_allclose(a[:2], 0.0, atol=1e-12)
    s.vel = np.array([0.1, 0.0])
    a = demos.scripted_expert_action(point_spec, s)
    assert a[0] < 0 and a[1] == 0.0


@pytest.mark.parametrize("spec", [EnvSpec(), EnvSpec(kind="arm_relocate")], ids=["point", "arm"])
def test_expert_success_rate(spec):
    _, ok = demos._run_expert_batch(spec, 0, range(100))
    assert ok.mean() >= 0.95


def test_generate_demos_count_and_actions(point_demos):
    assert len(point_demos) == 25
    assert all(t.has_actions and len(t.states) == len(t.actions) + 1 for t in point_demos.trajectories)
    assert not point_demos.state_only
    assert point_demos.env_fingerprint == EnvSpec().fingerprint()


def test_generate_single_demo(point_spec):
    d = demos.generate_demos(point_spec, 1, seed=3)
    assert len(d) == 1 and len(d.trajectories[0].states) == len(d.trajectories[0].actions) + 1


def test_generate_demos_deterministic(point_spec):
    a = demos.dumps(demos.generate_demos(point_spec, 3, seed=11))
    b = demos.dumps(demos.generate_demos(point_spec, 3, seed=11))
    assert a == b


def test_generate_demos_rejects_bad_n(point_spec):
    with pytest.raises(ValueError):
        demos.generate_demos(point_spec, 0)


def test_generate_demos_retry_cap():
    hopeless = EnvSpec(mass_multiplier=1000.0, horizon=10)
    stats = {}
    with pytest.raises(demos.ExpertFailure):
        demos.generate_demos(hopeless, 2, seed=0, stats=stats)
    assert stats["attempts"] == 20


def test_demos_replay_open_loop(point_demos, point_spec):
    # the demo reset streams are keyed per episode, so states[0] pins the reset;
    # replaying the stored actions through step must reproduce every state
    for traj in point_demos.trajectories[:5]:
        s0 = traj.states[0]
        state = envs.EnvState(s0[0:2].copy(), s0[2:4].copy(), s0[4:6].copy(), s0[6:8].copy(),
                              np.array(bool(s0[8])), 0)
        for t, a in enumerate(traj.actions):
            state, r, _ = envs.step(point_spec, state, a)
            np.testing.assert_array_equal(envs.observe(point_spec, state), traj.states[t + 1])
            assert r == traj.rewards[t]


def test_strip_actions(point_demos):
    stripped = demos.strip_actions(point_demos)
    assert stripped.state_only and all(not t.has_actions for t in stripped.trajectories)
    assert demos.dumps(demos.strip_actions(stripped)) == demos.dumps(stripped)
    for a, b in zip(point_demos.trajectories, stripped.trajectories):
        np.testing.assert_array_equal(a.states, b.states)


def test_adapt_actions_drops_removed_link_torques():
    arm = EnvSpec(kind="arm_relocate")
    d = demos.generate_demos(arm, 2, seed=0)
    two = envs.variant(arm, n_links=2)
    adapted = demos.adapt_actions(d, two)
    assert adapted.act_dim == 3
    np.testing.assert_array_equal(adapted.trajectories[0].actions[:, :2], d.trajectories[0].actions[:, :2])
    np.testing.assert_array_equal(adapted.trajectories[0].actions[:, 2], d.trajectories[0].actions[:, 3])


def test_save_load_round_trip(tmp_path, point_demos):
    path = tmp_path / "d.jsonl"
    t0 = time.perf_counter()
    demos.save(point_demos, path)
    loaded = demos.load(path)
    assert time.perf_counter() - t0 < 1.0
    assert loaded.env_fingerprint == point_demos.env_fingerprint
    assert loaded.state_only == point_demos.state_only and loaded.act_dim == point_demos.act_dim
    for a, b in zip(point_demos.trajectories, loaded.trajectories):
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.rewards, b.rewards)
    assert demos.dumps(loaded) == path.read_text()


def test_state_only_round_trip(tmp_path, small_demos):
    path = tmp_path / "s.jsonl"
    demos.save(demos.strip_actions(small_demos), path)
    loaded = demos.load(path)
    assert loaded.state_only and not loaded.trajectories[0].has_actions


def test_load_reports_line_numbers(tmp_path, small_demos):
    lines = demos.dumps(small_demos).splitlines()
    import json
    rec = json.loads(lines[2])
    rec["actions"] = rec["actions"][:-1]
    lines[2] = json.dumps(rec)
    path = tmp_path / "bad.jsonl"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DemoFormatError, match=r"bad.jsonl:3"):
        demos.load(path)
    path.write_text(lines[0] + "\n{not json\n")
    with pytest.raises(DemoFormatError, match=r":2:"):
        demos.load(path)
    path.write_text('{"version": 1}\n')
    with pytest.raises(DemoFormatError, match=r":1:"):
        demos.load(path)
