"""Training loops: SOIL, DAPG, plain NPG and two state-only matching baselines.

All five share one outer loop built on the NPG core.  Per iteration:

1. collect ``n_traj`` rollouts with the current policy;
2. (chamfer / density) add a state-matching bonus to the rewards;
3. estimate advantages, refit the value baseline;
4. (soil) push triplets to the replay buffer, run ``n_inv`` inverse-model
   updates, relabel the state-only demos;
5. add the annealed imitation term (soil: relabeled actions, dapg: demo actions);
6. take one natural-gradient step.

Random streams are keyed by purpose (see :mod:`soil.rng`), so algorithms run
with the same seed consume identical rollout randomness.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from soil import approx, envs, inverse, npg, rng as rng_mod
from soil.approx import GaussianPolicy, MlpSpec
from soil.demos import DemoSet, adapt_actions

ALGORITHMS = ("soil", "dapg", "npg", "chamfer", "density")
STATE_ONLY_ALGOS = ("soil", "chamfer", "density")

CURVE_COLUMNS = ("iter", "env_return_mean", "env_return_std", "shaped_return_mean", "success_rate",
                 "inv_loss", "imitation_weight", "realized_kl", "wall_ms")


@dataclass(frozen=True)
class ImitationSchedule:
    """Imitation weight lambda0 * lambda1**k."""

    lambda0: float = 0.1
    lambda1: float = 0.99

    def __post_init__(self):
        if self.lambda0 < 0:
            raise ValueError("lambda0 must be >= 0")
        if not 0 < self.lambda1 <= 1:
            raise ValueError("lambda1 must lie in (0, 1]")

    def weight(self, k: int) -> float:
        if k < 0:
            raise ValueError("k must be >= 0")
        return self.lambda0 * self.lambda1 ** k


@dataclass
class AlgoConfig:
    algorithm: str = "soil"
    n_iter: int = 200
    n_traj: int = 20
    n_inv: int = 5
    inv_batch: int = 64
    lambda0: float = 0.1
    lambda1: float = 0.99
    delta: float = npg.DEFAULT_DELTA
    gamma: float = npg.DEFAULT_GAMMA
    gae_lambda: float = npg.DEFAULT_GAE_LAMBDA
    cg_iters: int = npg.DEFAULT_CG_ITERS
    cg_tol: float = npg.DEFAULT_CG_TOL
    damping: float = approx.DEFAULT_DAMPING
    policy_hidden: tuple[int, ...] = (64, 64)
    value_hidden: tuple[int, ...] = (64, 64)
    inverse_hidden: tuple[int, ...] = (64, 64)
    disc_hidden: tuple[int, ...] = (64, 64)
    init_log_std: float = 0.0
    value_epochs: int = 10
    value_batch: int = 64
    value_scale: float = 100.0
    buffer_capacity: int = inverse.DEFAULT_CAPACITY
    inverse_lr: float = 1e-3
    inverse_diff_gain: float = inverse.DEFAULT_DIFF_GAIN
    ensemble_size: int = 1
    warmup_skip: int = 0
    demo_subsample: int = 0
    w_match: float = 0.1
    fisher_on_demos: bool = True
    disc_lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        for name in ("policy_hidden", "value_hidden", "inverse_hidden", "disc_hidden"):
            setattr(self, name, tuple(int(h) for h in getattr(self, name)))
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        for name in ("n_traj", "n_inv", "inv_batch", "cg_iters", "buffer_capacity", "ensemble_size", "value_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("n_iter", "warmup_skip", "demo_subsample", "value_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.delta <= 0:
            raise ValueError("delta must be > 0")
        self.schedule  # validates lambdas

    @property
    def schedule(self) -> ImitationSchedule:
        return ImitationSchedule(self.lambda0, self.lambda1)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AlgoConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown algorithm config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    policy: GaussianPolicy
    curve: list[dict] = field(default_factory=list)
    inverse_model: object | None = None
    discriminator: object | None = None

    def final(self, key: str = "env_return_mean", last: int = 10) -> float:
        """Mean of a curve column over the last ``last`` iterations."""
        vals = [row[key] for row in self.curve[-last:]]
        return float(np.mean(vals)) if vals else float("nan")


# --------------------------------------------------------------------------
# Imitation term


def imitation_gradient(policy: GaussianPolicy, demos: DemoSet, schedule: ImitationSchedule, k: int,
                       rng: np.random.Generator | None = None, subsample: int = 0) -> np.ndarray:
    """weight(k) * mean over demo pairs of grad log pi(a|s)."""
    if demos.state_only:
        raise ValueError("imitation term needs demonstrations with actions")
    weight = schedule.weight(k)
    if weight == 0.0:
        return np.zeros(policy.n_params)
    S, A = demos.state_action_pairs()
    if subsample and subsample < len(S):
        idx = (rng if rng is not None else np.random.default_rng(k)).choice(len(S), subsample, replace=False)
        S, A = S[idx], A[idx]
    return weight * approx.mean_grad_log_prob(policy, S, A)


# --------------------------------------------------------------------------
# State-matching baselines


def nearest_sq_dist(points: np.ndarray, reference: np.ndarray, tree: cKDTree | None = None) -> np.ndarray:
    """Squared distance from every row of ``points`` to its nearest row of ``reference``."""
    reference = np.atleast_2d(reference)
    if reference.shape[0] == 0:
        raise ValueError("reference set is empty")
    points = np.atleast_2d(points)
    if points.shape[1] != reference.shape[1]:
        raise ValueError("point sets have different dimensions")
    tree = tree if tree is not None else cKDTree(reference)
    d, _ = tree.query(points, k=1)
    return d * d


def chamfer_reward(policy_states, demo_states, tree: cKDTree | None = None) -> np.ndarray:
    """Per-state bonus: minus the squared distance to the nearest demo state."""
    return -nearest_sq_dist(policy_states, demo_states, tree)


def chamfer_distance(a, b) -> float:
    """Symmetric Chamfer distance: mean NN distance a->b plus mean NN distance b->a."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    fwd = np.sqrt(nearest_sq_dist(a, b)).mean()
    bwd = np.sqrt(nearest_sq_dist(b, a)).mean()
    return float(fwd + bwd)


class Discriminator:
    """Logistic classifier of demo (label 1) vs policy (label 0) states."""

    def __init__(self, obs_dim: int, hidden=(64, 64), rng: np.random.Generator | None = None,
                 lr: float = 1e-3, zero_init: bool = False):
        self.spec = MlpSpec(obs_dim, tuple(hidden), 1)
        if zero_init:
            self.params = np.zeros(self.spec.n_params)
        else:
            self.params = approx.init_params(self.spec, rng if rng is not None else np.random.default_rng(0))
            W, b = approx.unpack(self.spec, self.params)[-1]
            W *= 0.1
        self.opt = approx.Adam(self.spec.n_params, lr=lr)

    def logits(self, states) -> np.ndarray:
        return approx.mlp_forward(self.spec, self.params, np.atleast_2d(states))[:, 0]


def logistic_loss(disc: Discriminator, states, labels) -> float:
    z = disc.logits(states)
    y = np.asarray(labels, dtype=np.float64)
    # -[y log sig(z) + (1-y) log(1-sig(z))] = softplus(z) - y z
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def density_reward(disc: Discriminator, states) -> np.ndarray:
    """log D(s) - log(1 - D(s)), which equals the logit."""
    return disc.logits(states)


def density_update(disc: Discriminator, policy_states, demo_states, rng: np.random.Generator,
                   batch_size: int = 64) -> Discriminator:
    """One epoch over the policy states, each minibatch balanced with demo states."""
    P = np.atleast_2d(policy_states)
    D = np.atleast_2d(demo_states)
    if len(P) == 0 or len(D) == 0:
        raise ValueError("density_update needs policy and demo states")
    half = max(1, batch_size // 2)
    order = rng.permutation(len(P))
    for start in range(0, len(P), half):
        idx = order[start:start + half]
        demo_idx = rng.integers(0, len(D), size=len(idx))
        X = np.concatenate([P[idx], D[demo_idx]])
        y = np.concatenate([np.zeros(len(idx)), np.ones(len(idx))])
        z, cache = approx.forward_with_cache(disc.spec, disc.params, X)
        grad_out = (1.0 / (1.0 + np.exp(-z[:, 0])) - y)[:, None] / len(y)
        disc.params = disc.opt.step(disc.params, approx.backward(disc.spec, cache, grad_out))
    return disc


# --------------------------------------------------------------------------
# Training loop


def _check_demos(config: AlgoConfig, spec: envs.EnvSpec, demos: DemoSet | None) -> DemoSet | None:
    algo = config.algorithm
    if algo == "npg":
        return None
    if demos is None or len(demos) == 0:
        raise ValueError(f"algorithm {algo!r} needs demonstrations")
    if demos.obs_dim != spec.obs_dim:
        raise ValueError(f"demo observations have length {demos.obs_dim}, env produces {spec.obs_dim}")
    if algo == "dapg":
        if demos.state_only:
            raise ValueError("dapg needs demonstrations with actions (demo file has state_only=true)")
        return adapt_actions(demos, spec)
    if algo == "soil" and not demos.state_only:
        raise ValueError("soil expects state-only demonstrations (state_only=true)")
    return demos


def train(config: AlgoConfig, spec: envs.EnvSpec, demos: DemoSet | None = None,
          callback: Callable[[int, dict], None] | None = None, log_wall_time: bool = False) -> TrainResult:
    """Run ``config.algorithm`` on ``spec``.

    ``callback(iteration, info)`` is invoked after every policy update; info
    holds the new policy and, for SOIL, the inverse-model version used for
    relabeling.
    """
    demos = _check_demos(config, spec, demos)
    algo = config.algorithm
    seed = config.seed
    schedule = config.schedule
    policy = GaussianPolicy.create(spec.obs_dim, spec.act_dim, config.policy_hidden,
                                   rng_mod.stream(seed, "policy_init"), config.init_log_std)
    baseline = npg.ValueBaseline(spec.obs_dim, config.value_hidden, rng_mod.stream(seed, "baseline_init"),
                                 scale=config.value_scale)
    result = TrainResult(policy)

    buffer = models = predictor = disc = tree = demo_states = None
    if algo == "soil":
        buffer = inverse.ReplayBuffer(config.buffer_capacity)
        models = [inverse.InverseModel(spec.obs_dim, spec.act_dim, config.inverse_hidden,
                                       rng_mod.stream(seed, "inverse_init", m), config.inverse_lr,
                                       config.inverse_diff_gain)
                  for m in range(config.ensemble_size)]
        predictor = models[0] if len(models) == 1 else inverse.InverseEnsemble(models)
        result.inverse_model = predictor
    if algo in ("chamfer", "density"):
        demo_states = demos.all_states()
    if algo == "chamfer":
        tree = cKDTree(demo_states)
    if algo == "density":
        disc = Discriminator(spec.obs_dim, config.disc_hidden, rng_mod.stream(seed, "disc_init"), config.disc_lr)
        result.discriminator = disc

    for it in range(config.n_iter):
        t0 = time.perf_counter()
        batch = npg.collect_rollouts(spec, policy, seed, it, config.n_traj)
        reached = batch.obs[:, 1:].reshape(-1, spec.obs_dim)
        if algo == "chamfer":
            bonus = chamfer_reward(reached, demo_states, tree)
            batch.shaped = batch.rewards + config.w_match * bonus.reshape(batch.rewards.shape)
        elif algo == "density":
            density_update(disc, batch.states, demo_states, rng_mod.stream(seed, "disc_fit", it))
            bonus = density_reward(disc, reached)
            batch.shaped = batch.rewards + config.w_match * bonus.reshape(batch.rewards.shape)

        npg.estimate_advantages(batch, baseline, config.gamma, config.gae_lambda)
        npg.fit_baseline(baseline, batch.states, batch.returns, rng_mod.stream(seed, "baseline_fit", it),
                         config.value_epochs, config.value_batch)
        g = npg.vanilla_pg(policy, batch)

        inv_loss = float("nan")
        weight = 0.0
        relabel_version = None
        g_imit = None
        imit_pairs = None
        if algo == "soil":
            buffer.push(batch.states, np.clip(batch.flat_actions, -1.0, 1.0), batch.next_states)
            losses = []
            for j in range(config.n_inv):
                for m, model in enumerate(models):
                    mb = inverse.sample_batch(buffer, config.inv_batch, rng_mod.stream(seed, "inverse_batch", it, j, m))
                    losses.append(inverse.inv_train_step(model, mb))
            inv_loss = float(np.mean(losses)) if losses else float("nan")
            weight = schedule.weight(it)
            if it >= config.warmup_skip and weight > 0:
                relabeled = (inverse.relabel(demos, predictor) if len(models) == 1
                             else inverse.ensemble_relabel(demos, predictor))
                relabel_version = predictor.version
                imit_pairs = relabeled.state_action_pairs()
                g_imit = imitation_gradient(policy, relabeled, schedule, it,
                                            rng_mod.stream(seed, "imitation_subsample", it), config.demo_subsample)
        elif algo == "dapg":
            weight = schedule.weight(it)
            if weight > 0:
                imit_pairs = demos.state_action_pairs()
                g_imit = imitation_gradient(policy, demos, schedule, it,
                                            rng_mod.stream(seed, "imitation_subsample", it), config.demo_subsample)
        fisher_S, fisher_A = batch.states, batch.flat_actions
        if g_imit is not None:
            g = g + g_imit
            if config.fisher_on_demos:
                fisher_S = np.concatenate([fisher_S, imit_pairs[0]])
                fisher_A = np.concatenate([fisher_A, imit_pairs[1]])

        policy, info = npg.npg_update(policy, fisher_S, fisher_A, g, config.delta,
                                      config.cg_iters, config.cg_tol, config.damping,
                                      kl_states=batch.states)
        wall = (time.perf_counter() - t0) * 1000.0
        row = {
            "iter": it,
            "env_return_mean": float(batch.env_returns().mean()),
            "env_return_std": float(batch.env_returns().std()),
            "shaped_return_mean": float(batch.shaped_returns().mean()),
            "success_rate": float(batch.success.mean()),
            "inv_loss": inv_loss,
            "imitation_weight": weight if algo in ("soil", "dapg") else 0.0,
            "realized_kl": info.realized_kl,
            "wall_ms": wall if log_wall_time else None,
        }
        result.curve.append(row)
        result.policy = policy
        if callback is not None:
            callback(it, {"policy": policy, "relabel_version": relabel_version,
                          "inverse_version": None if predictor is None else predictor.version,
                          "imitation_gradient": g_imit, "step": info})
    return result


def soil_train(config: AlgoConfig, spec: envs.EnvSpec, state_only_demos: DemoSet, **kw) -> TrainResult:
    return train(_with_algo(config, "soil"), spec, state_only_demos, **kw)


def dapg_train(config: AlgoConfig, spec: envs.EnvSpec, demos: DemoSet, **kw) -> TrainResult:
    return train(_with_algo(config, "dapg"), spec, demos, **kw)


def npg_train(config: AlgoConfig, spec: envs.EnvSpec, **kw) -> TrainResult:
    return train(_with_algo(config, "npg"), spec, None, **kw)


def chamfer_train(config: AlgoConfig, spec: envs.EnvSpec, state_only_demos: DemoSet, **kw) -> TrainResult:
    return train(_with_algo(config, "chamfer"), spec, state_only_demos, **kw)


def density_train(config: AlgoConfig, spec: envs.EnvSpec, state_only_demos: DemoSet, **kw) -> TrainResult:
    return train(_with_algo(config, "density"), spec, state_only_demos, **kw)


def _with_algo(config: AlgoConfig, algo: str) -> AlgoConfig:
    return config if config.algorithm == algo else AlgoConfig.from_dict({**config.to_dict(), "algorithm": algo})


def evaluate(spec: envs.EnvSpec, policy: GaussianPolicy, episodes: int, seed: int) -> dict:
    """Mean-action (noise-free) evaluation."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if policy.obs_dim != spec.obs_dim or policy.act_dim != spec.act_dim:
        raise ValueError(f"policy dims ({policy.obs_dim}, {policy.act_dim}) do not fit env "
                         f"({spec.obs_dim}, {spec.act_dim})")
    batch = npg.collect_rollouts(spec, policy, seed, 0, episodes, deterministic=True, reset_purpose="eval_reset")
    ret = batch.env_returns()
    return {"episodes": episodes, "return_mean": float(ret.mean()), "return_std": float(ret.std()),
            "success_rate": float(batch.success.mean())}
