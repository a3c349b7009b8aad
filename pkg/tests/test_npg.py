import numpy as np
import pytest
from hypothesis import given, strategies as st

from soil import approx, npg
from soil.approx import GaussianPolicy, MlpSpec
from soil.npg import RolloutBatch


def random_update_case(rng, n=500):
    pol = GaussianPolicy.create(6, 2, (16, 16), rng)
    S = rng.standard_normal((n, 6))
    A = pol.mean(S) + np.exp(pol.log_std) * rng.standard_normal((n, 2))
    adv = npg.normalize(rng.standard_normal(n))
    return pol, S, A, approx.mean_grad_log_prob(pol, S, A, adv)


def toy_batch(rewards, obs_dim=2):
    rewards = np.atleast_2d(np.asarray(rewards, dtype=float))
    n, T = rewards.shape
    obs = np.zeros((n, T + 1, obs_dim))
    return RolloutBatch(obs, np.zeros((n, T, 1)), rewards, np.zeros(n, dtype=bool))


# --------------------------------------------------------------------------
# Advantages


def test_gae_undiscounted_sums():
    np.testing.assert_allclose(npg.gae([1.0, 1.0], [0.0, 0.0, 0.0], 1.0, 1.0), [2.0, 1.0])


def test_gae_gamma_zero_collapses():
    r, V = np.array([0.5, -1.0, 2.0]), np.array([0.3, 0.1, -0.4, 9.0])
    np.testing.assert_allclose(npg.gae(r, V, 0.0, 0.95), r - V[:-1])


def test_gae_matches_backward_recursion_oracle():
    adv = npg.gae([0.5, -1.0, 2.0, 0.3], [0.1, 0.4, -0.2, 0.7, 0.0], 0.9, 0.8)
    np.testing.assert_allclose(adv, [0.9401728000000001, 0.25024, 2.542, -0.39999999999999997], atol=1e-12)


def test_estimate_advantages_normalises():
    batch = toy_batch([[1.0, 1.0], [0.0, 3.0]])
    npg.estimate_advantages(batch, None, 1.0, 1.0, normalize_adv=False)
    np.testing.assert_allclose(batch.advantages, [2.0, 1.0, 3.0, 3.0])
    np.testing.assert_allclose(batch.returns, [2.0, 1.0, 3.0, 3.0])
    npg.estimate_advantages(batch, None, 1.0, 1.0)
    assert abs(batch.advantages.mean()) < 1e-10 and abs(batch.advantages.var() - 1) < 1e-10


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=200))
def test_normalize_property(xs):
    x = np.array(xs)
    out = npg.normalize(x)
    assert abs(out.mean()) < 1e-10
    if x.std() > 1e-6 * max(1.0, np.abs(x).max()):
        assert abs(out.var() - 1) < 1e-10


# --------------------------------------------------------------------------
# Baseline


def test_fit_baseline_constant_returns(rng):
    base = npg.ValueBaseline(3, (16, 16), rng, scale=10.0, lr=1e-2)
    S = rng.standard_normal((256, 3))
    y = np.full(256, 7.0)
    hist = npg.fit_baseline(base, S, y, rng, epochs=100)
    assert len(hist) == 101
    assert np.all(np.abs(base.predict(S) - 7.0) < 0.05 * 7.0)


def test_fit_baseline_zero_epochs_keeps_params(rng):
    base = npg.ValueBaseline(3, (8,), rng)
    before = base.params.copy()
    hist = npg.fit_baseline(base, rng.standard_normal((10, 3)), rng.standard_normal(10), rng, epochs=0)
    np.testing.assert_array_equal(base.params, before)
    assert len(hist) == 1


def test_fit_baseline_mse_non_increasing(rng):
    base = npg.ValueBaseline(4, (32, 32), rng, scale=1.0)
    S = rng.standard_normal((500, 4))
    y = np.sin(S[:, 0]) + S[:, 1] ** 2
    hist = npg.fit_baseline(base, S, y, rng, epochs=10)
    assert all(b <= a for a, b in zip(hist, hist[1:]))
    assert hist[-1] < hist[0]


# --------------------------------------------------------------------------
# Policy gradient


def test_vanilla_pg_zero_advantages(rng):
    pol = GaussianPolicy.create(2, 1, (4,), rng)
    batch = toy_batch([[1.0, 2.0]])
    batch.advantages = np.zeros(2)
    assert not npg.vanilla_pg(pol, batch).any()


def test_vanilla_pg_single_tuple(rng):
    pol = GaussianPolicy.create(2, 1, (4,), rng)
    batch = RolloutBatch(rng.standard_normal((1, 2, 2)), rng.standard_normal((1, 1, 1)), np.ones((1, 1)),
                         np.zeros(1, dtype=bool))
    batch.advantages = np.ones(1)
    np.testing.assert_allclose(npg.vanilla_pg(pol, batch),
                               approx.grad_log_prob(pol, batch.states[0], batch.flat_actions[0]), atol=1e-14)


def test_vanilla_pg_matches_surrogate_finite_differences():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(20):
        pol = GaussianPolicy.create(3, 2, (5,), rng)
        pol = pol.with_params(pol.params + 0.2 * rng.standard_normal(pol.n_params))
        obs = rng.standard_normal((2, 4, 3))
        batch = RolloutBatch(obs, rng.standard_normal((2, 3, 2)), rng.standard_normal((2, 3)),
                             np.zeros(2, dtype=bool))
        batch.advantages = rng.standard_normal(6)
        g = npg.vanilla_pg(pol, batch)

        def surrogate(th):
            return np.mean(approx.log_prob(pol.with_params(th), batch.states, batch.flat_actions) * batch.advantages)

        fd = np.zeros_like(g)
        for i in range(g.size):
            e = np.zeros_like(g)
            e[i] = 1e-5
            fd[i] = (surrogate(pol.params + e) - surrogate(pol.params - e)) / 2e-5
        worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    assert worst < 1e-4


# --------------------------------------------------------------------------
# Conjugate gradient


def test_cg_trivial_cases():
    assert not npg.conjugate_gradient(lambda v: v, np.zeros(3)).any()
    b = np.array([1.0, -2.0, 0.5])
    calls = []

    def ident(v):
        calls.append(1)
        return v

    np.testing.assert_allclose(npg.conjugate_gradient(ident, b), b)
    assert len(calls) == 1


def test_cg_two_by_two():
    A = np.array([[4.0, 1.0], [1.0, 3.0]])
    x = npg.conjugate_gradient(lambda v: A @ v, np.array([1.0, 2.0]))
    np.testing.assert_allclose(x, [1 / 11, 7 / 11], rtol=1e-12)


def test_cg_random_spd_systems():
    rng = np.random.default_rng(8)
    for _ in range(50):
        n = int(rng.integers(1, 21))
        M = rng.standard_normal((n, n))
        A = M @ M.T + 0.1 * np.eye(n)
        b = rng.standard_normal(n)
        x = npg.conjugate_gradient(lambda v: A @ v, b, iters=10 * n, tol=1e-14)
        ref = np.linalg.solve(A, b)
        assert np.linalg.norm(x - ref) / np.linalg.norm(ref) < 1e-8


def test_cg_non_finite_raises():
    with pytest.raises(npg.NumericalError):
        npg.conjugate_gradient(lambda v: v * np.nan, np.ones(2))


# --------------------------------------------------------------------------
# NPG step


def test_npg_zero_gradient_keeps_params(rng):
    pol, S, A, g = random_update_case(rng)
    new, info = npg.npg_update(pol, S, A, np.zeros_like(g), 0.01)
    np.testing.assert_array_equal(new.params, pol.params)
    assert info.degenerate


def test_npg_identity_fisher_closed_form(rng):
    pol, S, A, g = random_update_case(rng)
    new, info = npg.npg_update(pol, S, A, g, 0.01, fvp=lambda v: v, eps=0.0)
    expected = pol.params + np.sqrt(2 * 0.01 / (g @ g)) * g
    np.testing.assert_allclose(new.params, expected, rtol=1e-12)


def test_npg_realized_kl_in_trust_region():
    rng = np.random.default_rng(0)
    ratios = []
    for _ in range(50):
        pol, S, A, g = random_update_case(rng)
        _, info = npg.npg_update(pol, S, A, g, 0.01)
        ratios.append(info.realized_kl / 0.01)
    ratios = np.array(ratios)
    assert np.mean((ratios >= 0.25) & (ratios <= 4.0)) >= 0.9


def test_npg_step_monotone_in_delta(rng):
    pol, S, A, g = random_update_case(rng)
    norms = []
    for delta in (1e-1, 1e-2, 1e-3, 1e-4, 1e-6):
        new, _ = npg.npg_update(pol, S, A, g, delta)
        norms.append(np.linalg.norm(new.params - pol.params))
    assert all(b < a for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 1e-2 * norms[0]


def test_npg_rejects_bad_delta(rng):
    pol, S, A, g = random_update_case(rng, n=10)
    with pytest.raises(ValueError):
        npg.npg_update(pol, S, A, g, 0.0)


def test_npg_log_std_stays_clipped():
    spec = MlpSpec(1, (), 1)
    pol = GaussianPolicy(spec, np.array([0.0, 0.0, 1.99]))
    g = np.array([0.0, 0.0, 1.0])
    new, _ = npg.npg_update(pol, np.zeros((4, 1)), np.array([[3.0], [-3.0], [2.0], [-2.0]]), g, 10.0)
    assert new.params[-1] <= approx.LOG_STD_MAX


# --------------------------------------------------------------------------
# Rollouts


def test_collect_rollouts_shapes_and_determinism(point_spec, rng):
    pol = GaussianPolicy.create(point_spec.obs_dim, point_spec.act_dim, (8,), rng)
    a = npg.collect_rollouts(point_spec, pol, seed=3, iteration=2, n_traj=4)
    b = npg.collect_rollouts(point_spec, pol, seed=3, iteration=2, n_traj=4)
    assert a.obs.shape == (4, point_spec.horizon + 1, point_spec.obs_dim)
    assert a.actions.shape == (4, point_spec.horizon, point_spec.act_dim)
    np.testing.assert_array_equal(a.obs, b.obs)
    np.testing.assert_array_equal(a.actions, b.actions)
    c = npg.collect_rollouts(point_spec, pol, seed=3, iteration=3, n_traj=4)
    assert not np.array_equal(a.actions, c.actions)
    assert len(a.trajectories()) == 4 and a.n_steps == 4 * point_spec.horizon
