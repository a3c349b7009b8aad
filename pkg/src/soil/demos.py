"""Trajectories, demonstration sets, the scripted expert and the demo file format.

Demo files are JSON Lines.  Line 1 is a header
``{"version", "env_fingerprint", "obs_dim", "act_dim", "state_only"}`` and
each further line holds one trajectory
``{"states": [[...]], "actions": [[...]] | null, "rewards": [...] | null}``.
Floats are written with Python's shortest round-trip repr, so load(save(D))
reproduces D bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from soil import envs, rng as rng_mod
from soil.envs import EnvSpec

FORMAT_VERSION = 1
EXPERT_OMEGA = 3.0
EXPERT_GRASP_RAMP = 0.1
EXPERT_DLS = 0.05


class DemoFormatError(ValueError):
    pass


class ExpertFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray | None = None
    rewards: np.ndarray | None = None

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.float64)
        if states.ndim != 2 or states.shape[0] < 1:
            raise ValueError("states must be a (T+1, obs_dim) array")
        object.__setattr__(self, "states", states)
        T = states.shape[0] - 1
        if self.actions is not None:
            actions = np.asarray(self.actions, dtype=np.float64)
            if actions.ndim != 2 or actions.shape[0] != T:
                raise ValueError(f"expected {T} actions for {T + 1} states, got shape {actions.shape}")
            object.__setattr__(self, "actions", actions)
        if self.rewards is not None:
            rewards = np.asarray(self.rewards, dtype=np.float64)
            if rewards.shape != (T,):
                raise ValueError(f"expected {T} rewards for {T + 1} states, got shape {rewards.shape}")
            object.__setattr__(self, "rewards", rewards)
        for a in (states, self.actions, self.rewards):
            if a is not None and not np.all(np.isfinite(a)):
                raise ValueError("trajectory contains non-finite values")

    def __len__(self) -> int:
        return self.states.shape[0] - 1

    @property
    def has_actions(self) -> bool:
        return self.actions is not None


@dataclass(frozen=True)
class DemoSet:
    trajectories: tuple[Trajectory, ...] = field(default_factory=tuple)
    env_fingerprint: str = ""
    state_only: bool = False
    act_dim: int | None = None

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        object.__setattr__(self, "trajectories", trajs)
        if self.state_only and any(t.has_actions for t in trajs):
            raise ValueError("state-only demo set contains actions")
        if len({t.states.shape[1] for t in trajs}) > 1:
            raise ValueError("trajectories disagree on observation length")
        if self.act_dim is None:
            dims = {t.actions.shape[1] for t in trajs if t.has_actions}
            if dims:
                object.__setattr__(self, "act_dim", dims.pop())

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def obs_dim(self) -> int | None:
        return self.trajectories[0].states.shape[1] if self.trajectories else None

    def state_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """All (s_t, s_{t+1}) pairs stacked over trajectories."""
        if not self.trajectories:
            return np.zeros((0, 0)), np.zeros((0, 0))
        s = np.concatenate([t.states[:-1] for t in self.trajectories])
        s2 = np.concatenate([t.states[1:] for t in self.trajectories])
        return s, s2

    def state_action_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        if self.state_only or any(not t.has_actions for t in self.trajectories):
            raise ValueError("demo set has no actions")
        s = np.concatenate([t.states[:-1] for t in self.trajectories])
        a = np.concatenate([t.actions for t in self.trajectories])
        return s, a

    def all_states(self) -> np.ndarray:
        return np.concatenate([t.states for t in self.trajectories])


# --------------------------------------------------------------------------
# Scripted expert


def _grasp_command(dist: np.ndarray, radius: float) -> np.ndarray:
    # 1 inside 1.2 r, ramps linearly to -1 over EXPERT_GRASP_RAMP
    return np.clip(1.0 - 2.0 * (dist - 1.2 * radius) / EXPERT_GRASP_RAMP, -1.0, 1.0)


def scripted_expert_action(spec: EnvSpec, state: envs.EnvState) -> np.ndarray:
    """PD controller: reach the object, close the grasp, carry it to the goal.

    Works on single or batched states.
    """
    attached = np.asarray(state.attached, dtype=bool)
    eff = envs.effector(spec, state)
    eff_vel = envs.effector_velocity(spec, state)
    target = np.where(attached[..., None], state.goal, state.obj)
    w = EXPERT_OMEGA
    acc = w * w * (target - eff) - 2.0 * w * eff_vel
    dist = np.linalg.norm(eff - state.obj, axis=-1)
    grasp = _grasp_command(dist, spec.grasp_radius)

    if spec.kind == "point_relocate":
        force = acc * envs.POINT_MASS * spec.mass_multiplier / envs.FORCE_SCALE
        move = np.clip(force, -1.0, 1.0)
    else:
        n = spec.n_links
        J = envs.arm_jacobian(spec, state.kin)
        JT = np.swapaxes(J, -1, -2)
        JJt = J @ JT + EXPERT_DLS ** 2 * np.eye(2)
        J_pinv = JT @ np.linalg.inv(JJt)
        qd = state.vel[..., :n]
        qdd = (J_pinv @ acc[..., None])[..., 0]
        null = np.eye(n) - J_pinv @ J
        qdd = qdd - 2.0 * w * (null @ qd[..., None])[..., 0]
        torque = (qdd + envs.JOINT_DAMPING * qd) * envs.joint_inertia(spec) / envs.TORQUE_SCALE
        move = np.clip(torque, -1.0, 1.0)
    return np.concatenate([move, grasp[..., None]], axis=-1)


def _run_expert_batch(spec: EnvSpec, seed: int, episode_ids) -> tuple[list[Trajectory], np.ndarray]:
    state = envs.reset_batch(spec, [rng_mod.stream(seed, "demo_reset", k) for k in episode_ids])
    obs = [envs.observe(spec, state)]
    acts, rews = [], []
    success = envs.is_success(state)
    for _ in range(spec.horizon):
        a = scripted_expert_action(spec, state)
        state, r, _ = envs.step(spec, state, a)
        obs.append(envs.observe(spec, state))
        acts.append(a)
        rews.append(r)
        success = success | envs.is_success(state)
    S = np.stack(obs, axis=1)
    A = np.stack(acts, axis=1)
    R = np.stack(rews, axis=1)
    trajs = [Trajectory(S[i], A[i], R[i]) for i in range(len(episode_ids))]
    return trajs, success


def generate_demos(spec: EnvSpec, n: int = 25, seed: int = 0, stats: dict | None = None) -> DemoSet:
    """Roll out the scripted expert until ``n`` successful episodes are collected.

    Failed episodes are discarded and resampled, at most ``10 * n`` attempts.
    If ``stats`` is given it receives the attempt and success counts.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    cap = 10 * n
    kept: list[Trajectory] = []
    tried = 0
    while len(kept) < n:
        if tried >= cap:
            raise ExpertFailure(f"expert succeeded in only {len(kept)} of {tried} episodes (needed {n})")
        ids = range(tried, min(tried + n, cap))
        trajs, ok = _run_expert_batch(spec, seed, ids)
        tried += len(ids)
        kept.extend(t for t, s in zip(trajs, ok) if s)
        if stats is not None:
            stats.update(attempts=tried, successes=len(kept))
    return DemoSet(tuple(kept[:n]), spec.fingerprint(), False, spec.act_dim)


def strip_actions(demos: DemoSet) -> DemoSet:
    trajs = tuple(Trajectory(t.states) for t in demos.trajectories)
    return DemoSet(trajs, demos.env_fingerprint, True, demos.act_dim)


def adapt_actions(demos: DemoSet, spec: EnvSpec) -> DemoSet:
    """Fit demonstrator actions to a learner whose action layout differs.

    Only the arm's link count changes the layout: torques of removed links
    are dropped, the grasp channel is kept.
    """
    if demos.state_only or demos.act_dim is None or demos.act_dim == spec.act_dim:
        return demos
    if demos.act_dim < spec.act_dim:
        raise ValueError(f"cannot widen {demos.act_dim}-dim demo actions to {spec.act_dim}")
    keep = list(range(spec.act_dim - 1)) + [demos.act_dim - 1]
    trajs = tuple(Trajectory(t.states, t.actions[:, keep], t.rewards) for t in demos.trajectories)
    return DemoSet(trajs, demos.env_fingerprint, False, spec.act_dim)


# --------------------------------------------------------------------------
# Persistence


def _rows(a: np.ndarray | None):
    return None if a is None else a.tolist()


def dumps(demos: DemoSet) -> str:
    header = {
        "version": FORMAT_VERSION,
        "env_fingerprint": demos.env_fingerprint,
        "obs_dim": demos.obs_dim,
        "act_dim": demos.act_dim,
        "state_only": demos.state_only,
    }
    lines = [json.dumps(header)]
    for t in demos.trajectories:
        lines.append(json.dumps({"states": _rows(t.states), "actions": _rows(t.actions), "rewards": _rows(t.rewards)}))
    return "\n".join(lines) + "\n"


def save(demos: DemoSet, path) -> None:
    Path(path).write_text(dumps(demos))


def load(path) -> DemoSet:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise DemoFormatError(f"{path}:1: empty demo file")
    try:
        header = json.loads(lines[0])
        for key in ("version", "env_fingerprint", "obs_dim", "act_dim", "state_only"):
            if key not in header:
                raise DemoFormatError(f"{path}:1: header missing {key!r}")
    except json.JSONDecodeError as e:
        raise DemoFormatError(f"{path}:1: bad header: {e}") from None
    if header["version"] != FORMAT_VERSION:
        raise DemoFormatError(f"{path}:1: unsupported version {header['version']}")
    trajs = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            t = Trajectory(rec["states"], rec.get("actions"), rec.get("rewards"))
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as e:
            raise DemoFormatError(f"{path}:{lineno}: {e}") from None
        if header["obs_dim"] is not None and t.states.shape[1] != header["obs_dim"]:
            raise DemoFormatError(f"{path}:{lineno}: observation length {t.states.shape[1]} != {header['obs_dim']}")
        if t.has_actions and header["act_dim"] is not None and t.actions.shape[1] != header["act_dim"]:
            raise DemoFormatError(f"{path}:{lineno}: action length {t.actions.shape[1]} != {header['act_dim']}")
        if header["state_only"] and t.has_actions:
            raise DemoFormatError(f"{path}:{lineno}: actions present in a state-only file")
        trajs.append(t)
    return DemoSet(tuple(trajs), header["env_fingerprint"], bool(header["state_only"]), header["act_dim"])
