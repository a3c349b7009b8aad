import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from soil import algos, approx, demos
from soil.algos import AlgoConfig, Discriminator, ImitationSchedule
from soil.approx import GaussianPolicy
from soil.demos import DemoSet, Trajectory
from soil.envs import EnvSpec

TINY = dict(n_iter=3, n_traj=4, policy_hidden=(8,), value_hidden=(8,), inverse_hidden=(8,),
            disc_hidden=(8,), value_epochs=2)


@pytest.fixture(scope="module")
def short_env():
    return EnvSpec(horizon=20)


@pytest.fixture(scope="module")
def short_demos(short_env):
    return demos.generate_demos(EnvSpec(), n=3, seed=3)


def short_state_only(d):
    return demos.strip_actions(d)


def config(algo, **kw):
    return AlgoConfig(algorithm=algo, **{**TINY, **kw})


# --------------------------------------------------------------------------
# Schedule and imitation term


def test_schedule_values():
    s = ImitationSchedule(0.5, 0.9)
    assert s.weight(0) == 0.5
    assert s.weight(2) == pytest.approx(0.405)
    assert ImitationSchedule(0.1, 1.0).weight(1000) == 0.1
    with pytest.raises(ValueError):
        ImitationSchedule(-1.0, 0.9)
    with pytest.raises(ValueError):
        ImitationSchedule(0.1, 1.5)
    with pytest.raises(ValueError):
        s.weight(-1)


@given(st.floats(0, 10), st.floats(0.01, 1.0), st.integers(0, 500))
def test_schedule_nonincreasing_and_nonnegative(l0, l1, k):
    s = ImitationSchedule(l0, l1)
    assert 0 <= s.weight(k + 1) <= s.weight(k)


def one_pair_demo(rng, obs_dim=3, act_dim=2):
    return DemoSet((Trajectory(rng.standard_normal((2, obs_dim)), rng.uniform(-1, 1, (1, act_dim))),))


def test_imitation_gradient_zero_weight(rng):
    pol = GaussianPolicy.create(3, 2, (5,), rng)
    g = algos.imitation_gradient(pol, one_pair_demo(rng), ImitationSchedule(0.0, 0.9), 0)
    assert g.shape == (pol.n_params,) and not g.any()


def test_imitation_gradient_single_pair_exact(rng):
    pol = GaussianPolicy.create(3, 2, (5,), rng)
    d = one_pair_demo(rng)
    g = algos.imitation_gradient(pol, d, ImitationSchedule(1.0, 1.0), 7)
    S, A = d.state_action_pairs()
    np.testing.assert_array_equal(g, approx.grad_log_prob(pol, S[0], A[0]))


def test_imitation_gradient_decays(rng):
    pol = GaussianPolicy.create(3, 2, (5,), rng)
    d = one_pair_demo(rng)
    g = algos.imitation_gradient(pol, d, ImitationSchedule(1.0, 0.9), 2000)
    assert np.linalg.norm(g) < 1e-80


def test_imitation_gradient_bounded_by_schedule(rng):
    pol = GaussianPolicy.create(3, 2, (5,), rng)
    d = DemoSet(tuple(Trajectory(rng.standard_normal((6, 3)), rng.uniform(-1, 1, (5, 2))) for _ in range(3)))
    S, A = d.state_action_pairs()
    max_norm = max(np.linalg.norm(approx.grad_log_prob(pol, s, a)) for s, a in zip(S, A))
    sched = ImitationSchedule(0.3, 0.95)
    for k in (0, 5, 50):
        g = algos.imitation_gradient(pol, d, sched, k)
        assert np.linalg.norm(g) <= sched.weight(k) * max_norm + 1e-12


def test_imitation_gradient_state_only_fails(rng):
    pol = GaussianPolicy.create(3, 2, (5,), rng)
    with pytest.raises(ValueError):
        algos.imitation_gradient(pol, demos.strip_actions(one_pair_demo(rng)), ImitationSchedule(), 0)


# --------------------------------------------------------------------------
# Chamfer and density baselines


def test_chamfer_subset_zero_bonus(rng):
    D = rng.standard_normal((20, 4))
    assert not algos.chamfer_reward(D[[3, 7, 7, 19]], D).any()


def test_chamfer_one_dimensional_example():
    np.testing.assert_array_equal(algos.chamfer_reward([[0.0], [2.0]], [[1.0]]), [-1.0, -1.0])
    assert algos.chamfer_distance([[0.0], [2.0]], [[1.0]]) == 2.0


def test_chamfer_empty_reference_fails():
    with pytest.raises(ValueError):
        algos.chamfer_reward(np.zeros((2, 2)), np.zeros((0, 2)))


@given(st.integers(1, 50), st.integers(1, 50), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_chamfer_matches_brute_force(n, m, d, seed):
    r = np.random.default_rng(seed)
    P, D = r.standard_normal((n, d)), r.standard_normal((m, d))
    brute = -np.array([min(float(np.sum((p - q) ** 2)) for q in D) for p in P])
    np.testing.assert_allclose(algos.chamfer_reward(P, D), brute, rtol=0, atol=1e-12)


def test_zero_disc_bonus_and_initial_loss(rng):
    disc = Discriminator(3, (8,), zero_init=True)
    X = rng.standard_normal((64, 3))
    assert not algos.density_reward(disc, X).any()
    labels = np.r_[np.zeros(32), np.ones(32)]
    assert algos.logistic_loss(disc, X, labels) == pytest.approx(math.log(2), abs=0.01)


def test_density_separable_toy():
    rng = np.random.default_rng(0)
    disc = Discriminator(1, (8,), rng, lr=1e-2)
    policy_states = rng.uniform(-2, -1, (64, 1))
    demo_states = rng.uniform(1, 2, (64, 1))
    for k in range(200):
        algos.density_update(disc, policy_states, demo_states, np.random.default_rng(k))
    bonus_demo = algos.density_reward(disc, demo_states).mean()
    bonus_policy = algos.density_reward(disc, policy_states).mean()
    assert bonus_demo > bonus_policy


def test_density_update_empty_fails(rng):
    with pytest.raises(ValueError):
        algos.density_update(Discriminator(2, (4,)), np.zeros((0, 2)), np.ones((3, 2)), rng)


# --------------------------------------------------------------------------
# Training loops


def test_zero_iterations_return_initial_policy(short_env, short_demos):
    ref = algos.npg_train(config("npg", n_iter=0), short_env).policy
    for algo, d in (("soil", short_state_only(short_demos)), ("dapg", short_demos), ("npg", None),
                    ("chamfer", short_state_only(short_demos)), ("density", short_state_only(short_demos))):
        res = algos.train(config(algo, n_iter=0), short_env, d)
        assert res.curve == []
        np.testing.assert_array_equal(res.policy.params, ref.params)


def test_lambda0_zero_reduces_to_npg(short_env, short_demos):
    def params_seq(algo, d):
        seq = []
        algos.train(config(algo, lambda0=0.0), short_env, d, callback=lambda i, info: seq.append(info["policy"].params))
        return seq

    ref = params_seq("npg", None)
    for algo, d in (("soil", short_state_only(short_demos)), ("dapg", short_demos)):
        seq = params_seq(algo, d)
        assert len(seq) == len(ref)
        for a, b in zip(seq, ref):
            np.testing.assert_array_equal(a, b)


def test_npg_bit_reproducible(short_env):
    a = algos.npg_train(config("npg"), short_env)
    b = algos.npg_train(config("npg"), short_env)
    assert [repr(r) for r in a.curve] == [repr(r) for r in b.curve]
    np.testing.assert_array_equal(a.policy.params, b.policy.params)


def test_soil_relabels_with_current_inverse_model(short_env, short_demos):
    seen = []
    algos.soil_train(config("soil", n_iter=4), short_env, short_state_only(short_demos),
                     callback=lambda i, info: seen.append((info["relabel_version"], info["inverse_version"])))
    assert len(seen) == 4
    for i, (rv, iv) in enumerate(seen):
        assert rv == iv == (i + 1) * TINY.get("n_inv", 5)


def test_curve_columns_and_separate_shaped_return(short_env, short_demos):
    res = algos.chamfer_train(config("chamfer"), short_env, short_state_only(short_demos))
    assert len(res.curve) == 3
    for row in res.curve:
        assert tuple(row) == algos.CURVE_COLUMNS
        assert row["shaped_return_mean"] < row["env_return_mean"]
        assert row["wall_ms"] is None


def test_density_train_runs(short_env, short_demos):
    res = algos.density_train(config("density"), short_env, short_state_only(short_demos))
    assert len(res.curve) == 3 and res.discriminator is not None
    assert all(np.isfinite(r["env_return_mean"]) for r in res.curve)


def test_demo_requirements(short_env, short_demos):
    with pytest.raises(ValueError, match="state_only"):
        algos.dapg_train(config("dapg"), short_env, short_state_only(short_demos))
    with pytest.raises(ValueError, match="state-only"):
        algos.soil_train(config("soil"), short_env, short_demos)
    with pytest.raises(ValueError):
        algos.soil_train(config("soil"), short_env, None)
    arm = EnvSpec(kind="arm_relocate", horizon=20)
    if arm.obs_dim != short_env.obs_dim:
        with pytest.raises(ValueError):
            algos.soil_train(config("soil"), arm, short_state_only(short_demos))


def test_algo_config_validation():
    with pytest.raises(ValueError):
        AlgoConfig(algorithm="gail")
    with pytest.raises(ValueError):
        AlgoConfig(n_traj=0)
    with pytest.raises(ValueError):
        AlgoConfig(lambda1=0.0)
    with pytest.raises(ValueError):
        AlgoConfig.from_dict({"bogus": 1})
    cfg = AlgoConfig(policy_hidden=[32, 32])
    assert AlgoConfig.from_dict(cfg.to_dict()) == cfg


def test_evaluate(short_env, rng):
    pol = GaussianPolicy.create(short_env.obs_dim, short_env.act_dim, (8,), rng)
    out = algos.evaluate(short_env, pol, 5, 0)
    assert out["episodes"] == 5 and 0 <= out["success_rate"] <= 1
    assert out == algos.evaluate(short_env, pol, 5, 0)
    with pytest.raises(ValueError):
        algos.evaluate(short_env, pol, 0, 0)
