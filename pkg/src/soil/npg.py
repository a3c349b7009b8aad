"""On-policy RL core: rollouts, GAE, value baseline, policy gradient, NPG step."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from soil import approx, envs, rng as rng_mod
from soil.approx import GaussianPolicy, MlpSpec
from soil.demos import Trajectory

DEFAULT_DELTA = 0.01
DEFAULT_GAMMA = 0.995
DEFAULT_GAE_LAMBDA = 0.97
DEFAULT_CG_ITERS = 25
DEFAULT_CG_TOL = 1e-10
DEFAULT_EPS = 1e-8


class NumericalError(ArithmeticError):
    pass


@dataclass
class RolloutBatch:
    """Fixed-horizon rollouts stored as dense arrays.

    obs: (n_traj, T + 1, obs_dim); actions: (n_traj, T, act_dim) as sampled
    (before the env clips them); rewards: env rewards (n_traj, T);
    shaped: rewards used for advantages (env reward plus any matching bonus).
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    success: np.ndarray
    shaped: np.ndarray | None = None
    advantages: np.ndarray | None = field(default=None, repr=False)
    returns: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.shaped is None:
            self.shaped = self.rewards.copy()

    @classmethod
    def from_trajectories(cls, trajs: list[Trajectory]) -> "RolloutBatch":
        if any(t.actions is None or t.rewards is None for t in trajs):
            raise ValueError("rollout trajectories need actions and rewards")
        obs = np.stack([t.states for t in trajs])
        acts = np.stack([t.actions for t in trajs])
        rews = np.stack([t.rewards for t in trajs])
        return cls(obs, acts, rews, np.zeros(len(trajs), dtype=bool))

    @property
    def n_traj(self) -> int:
        return self.obs.shape[0]

    @property
    def n_steps(self) -> int:
        return self.actions.shape[0] * self.actions.shape[1]

    @property
    def states(self) -> np.ndarray:
        """Flat (N, obs_dim) view of the states that actions were taken in."""
        return self.obs[:, :-1].reshape(-1, self.obs.shape[-1])

    @property
    def next_states(self) -> np.ndarray:
        return self.obs[:, 1:].reshape(-1, self.obs.shape[-1])

    @property
    def flat_actions(self) -> np.ndarray:
        return self.actions.reshape(-1, self.actions.shape[-1])

    def trajectories(self) -> list[Trajectory]:
        return [Trajectory(self.obs[i], self.actions[i], self.rewards[i]) for i in range(self.n_traj)]

    def env_returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)

    def shaped_returns(self) -> np.ndarray:
        return self.shaped.sum(axis=1)


def collect_rollouts(spec: envs.EnvSpec, policy: GaussianPolicy, seed: int, iteration: int,
                     n_traj: int, deterministic: bool = False, reset_purpose: str = "reset") -> RolloutBatch:
    """Run ``n_traj`` episodes in lockstep.

    Trajectory ``j`` draws its start state from stream (seed, reset, iteration, j)
    and its action noise from stream (seed, action, iteration, j).
    """
    T = spec.horizon
    state = envs.reset_batch(spec, [rng_mod.stream(seed, reset_purpose, iteration, j) for j in range(n_traj)])
    if deterministic:
        noise = np.zeros((n_traj, T, policy.act_dim))
    else:
        noise = np.stack([rng_mod.stream(seed, "action", iteration, j).standard_normal((T, policy.act_dim))
                          for j in range(n_traj)])
    sigma = np.exp(policy.log_std)
    obs = np.empty((n_traj, T + 1, spec.obs_dim))
    acts = np.empty((n_traj, T, policy.act_dim))
    rews = np.empty((n_traj, T))
    obs[:, 0] = envs.observe(spec, state)
    success = envs.is_success(state)
    for t in range(T):
        a = policy.mean(obs[:, t]) + sigma * noise[:, t]
        state, r, _ = envs.step(spec, state, a)
        acts[:, t] = a
        rews[:, t] = r
        obs[:, t + 1] = envs.observe(spec, state)
        success = success | envs.is_success(state)
    return RolloutBatch(obs, acts, rews, success)


# --------------------------------------------------------------------------
# Advantages and baseline


def gae(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    """Raw GAE advantages along the last axis.

    ``values`` has one more entry than ``rewards``; the final entry is the
    bootstrap value of the state after the last reward.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    T = rewards.shape[-1]
    deltas = rewards + gamma * values[..., 1:] - values[..., :-1]
    adv = np.zeros_like(deltas)
    running = np.zeros(deltas.shape[:-1])
    for t in range(T - 1, -1, -1):
        running = deltas[..., t] + gamma * lam * running
        adv[..., t] = running
    return adv


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[:-1])
    for t in range(rewards.shape[-1] - 1, -1, -1):
        running = rewards[..., t] + gamma * running
        out[..., t] = running
    return out


def normalize(adv: np.ndarray) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size < 2:
        return adv - adv.mean() if adv.size else adv
    centered = adv - adv.mean()
    std = adv.std()
    return centered / std if std > 0 else centered


class ValueBaseline:
    """MLP regression of discounted return; predictions are net(s) * scale."""

    def __init__(self, obs_dim: int, hidden=(64, 64), rng: np.random.Generator | None = None,
                 scale: float = 100.0, lr: float = 1e-3):
        self.spec = MlpSpec(obs_dim, tuple(hidden), 1)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = approx.init_params(self.spec, rng)
        self.scale = float(scale)
        self.opt = approx.Adam(self.spec.n_params, lr=lr)

    def predict(self, states) -> np.ndarray:
        out = approx.mlp_forward(self.spec, self.params, np.atleast_2d(states))[:, 0]
        return out * self.scale

    def mse(self, states, targets) -> float:
        return float(np.mean((self.predict(states) - targets) ** 2))


def fit_baseline(baseline: ValueBaseline, states: np.ndarray, targets: np.ndarray,
                 rng: np.random.Generator, epochs: int = 10, batch_size: int = 64) -> list[float]:
    """Mini-batch Adam regression of the baseline onto ``targets``.

    An epoch that raises the training-set MSE has its parameter change
    undone (the optimizer moments are kept, so the next epoch takes a
    different path), which makes the MSE history non-increasing.  Returns
    the MSE before fitting followed by the MSE after each epoch.
    """
    S = np.atleast_2d(np.asarray(states, dtype=np.float64))
    y = np.asarray(targets, dtype=np.float64) / baseline.scale
    history = [baseline.mse(S, targets)]
    n = S.shape[0]
    for _ in range(epochs):
        saved = baseline.params.copy()
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            out, cache = approx.forward_with_cache(baseline.spec, baseline.params, S[idx])
            grad_out = 2.0 * (out[:, 0] - y[idx])[:, None] / len(idx)
            grad = approx.backward(baseline.spec, cache, grad_out)
            baseline.params = baseline.opt.step(baseline.params, grad)
        err = baseline.mse(S, targets)
        if err > history[-1]:
            baseline.params = saved
            err = history[-1]
        history.append(err)
    return history


def estimate_advantages(batch: RolloutBatch, baseline: ValueBaseline | None, gamma: float = DEFAULT_GAMMA,
                        lam: float = DEFAULT_GAE_LAMBDA, normalize_adv: bool = True) -> RolloutBatch:
    """Fill ``batch.advantages`` (flat, per step) and ``batch.returns``.

    Episodes end at the horizon, so the value after the last step is 0.
    """
    n, T1, d = batch.obs.shape
    if baseline is None:
        values = np.zeros((n, T1))
    else:
        values = baseline.predict(batch.obs.reshape(-1, d)).reshape(n, T1)
    values[:, -1] = 0.0
    adv = gae(batch.shaped, values, gamma, lam).reshape(-1)
    batch.advantages = normalize(adv) if normalize_adv else adv
    batch.returns = discounted_returns(batch.shaped, gamma).reshape(-1)
    return batch


# --------------------------------------------------------------------------
# Gradients and the natural-gradient step


def vanilla_pg(policy: GaussianPolicy, batch: RolloutBatch) -> np.ndarray:
    """Mean over steps of grad log pi(a|s) * A(s, a)."""
    if batch.advantages is None:
        raise ValueError("advantages not estimated")
    return approx.mean_grad_log_prob(policy, batch.states, batch.flat_actions, batch.advantages)


def conjugate_gradient(apply_A, b, iters: int = DEFAULT_CG_ITERS, tol: float = DEFAULT_CG_TOL) -> np.ndarray:
    """Solve A x = b for symmetric positive definite A given as a matvec."""
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return x
    r = b.copy()
    p = r.copy()
    rr = r @ r
    for _ in range(iters):
        Ap = apply_A(p)
        pAp = p @ Ap
        if not np.isfinite(pAp):
            raise NumericalError("non-finite curvature in conjugate gradient")
        if pAp <= 0:
            break
        alpha = rr / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rr_new = r @ r
        if not np.isfinite(rr_new):
            raise NumericalError("non-finite residual in conjugate gradient")
        if math.sqrt(rr_new) <= tol * b_norm:
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


@dataclass
class StepInfo:
    grad_norm: float
    step_size: float
    realized_kl: float
    gFg: float
    degenerate: bool = False


def npg_update(policy: GaussianPolicy, states, actions, g, delta: float = DEFAULT_DELTA,
               cg_iters: int = DEFAULT_CG_ITERS, cg_tol: float = DEFAULT_CG_TOL,
               damping: float = approx.DEFAULT_DAMPING, eps: float = DEFAULT_EPS, fvp=None, kl_states=None):
    """Natural gradient ascent step of KL size ``delta``.

    Solves F x = g with conjugate gradient on the empirical Fisher of
    (states, actions) and moves theta by sqrt(2 delta / (g.x + eps)) * x.
    ``fvp`` overrides the Fisher operator; ``kl_states`` (default: ``states``)
    are where the realized KL is measured.  Returns (new_policy, StepInfo).
    """
    if delta <= 0:
        raise ValueError("delta must be > 0")
    g = np.asarray(g, dtype=np.float64)
    S = np.atleast_2d(states)
    grad_norm = float(np.linalg.norm(g))
    if fvp is None:
        fvp = approx.fisher_operator(policy, S, actions, damping)
    x = conjugate_gradient(fvp, g, cg_iters, cg_tol)
    gx = float(g @ x)
    if not gx > 0:
        return policy.copy(), StepInfo(grad_norm, 0.0, 0.0, gx, degenerate=True)
    alpha = math.sqrt(2.0 * delta / (gx + eps))
    theta = policy.params + alpha * x
    k = policy.mean_spec.n_params
    theta[k:] = np.clip(theta[k:], approx.LOG_STD_MIN, approx.LOG_STD_MAX)
    new = policy.with_params(theta)
    kl_S = S if kl_states is None else np.atleast_2d(kl_states)
    return new, StepInfo(grad_norm, alpha, approx.mean_kl(policy, new, kl_S), gx)
