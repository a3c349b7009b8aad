"""Self-supervised inverse dynamics: replay buffer, model, relabeling."""

from __future__ import annotations

import numpy as np

from soil import approx
from soil.approx import MlpSpec
from soil.demos import DemoSet, Trajectory

DEFAULT_CAPACITY = 50_000
DEFAULT_DIFF_GAIN = 20.0


class ReplayBuffer:
    """FIFO ring buffer of (s_t, a_t, s_{t+1}) triplets."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.n_inserted = 0
        self._s = self._a = self._s2 = None

    def __len__(self) -> int:
        return min(self.n_inserted, self.capacity)

    def _allocate(self, obs_dim: int, act_dim: int) -> None:
        self._s = np.zeros((self.capacity, obs_dim))
        self._a = np.zeros((self.capacity, act_dim))
        self._s2 = np.zeros((self.capacity, obs_dim))

    def push(self, s, a, s2) -> None:
        """Append a block of triplets (rows), evicting the oldest if full."""
        s, a, s2 = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (s, a, s2))
        if not (s.shape[0] == a.shape[0] == s2.shape[0]) or s.shape != s2.shape:
            raise ValueError("triplet blocks disagree in shape")
        if self._s is None:
            self._allocate(s.shape[1], a.shape[1])
        elif s.shape[1] != self._s.shape[1] or a.shape[1] != self._a.shape[1]:
            raise ValueError("triplet dims do not match the buffer")
        n = s.shape[0]
        if n > self.capacity:
            self.n_inserted += n - self.capacity
            s, a, s2 = s[-self.capacity:], a[-self.capacity:], s2[-self.capacity:]
            n = self.capacity
        idx = (self.n_inserted + np.arange(n)) % self.capacity
        self._s[idx], self._a[idx], self._s2[idx] = s, a, s2
        self.n_inserted += n

    def contents(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stored triplets, oldest first."""
        size = len(self)
        if size == 0:
            return np.zeros((0, 0)), np.zeros((0, 0)), np.zeros((0, 0))
        idx = (self.n_inserted - size + np.arange(size)) % self.capacity
        return self._s[idx], self._a[idx], self._s2[idx]


def push_trajectory(buffer: ReplayBuffer, traj: Trajectory) -> ReplayBuffer:
    if not traj.has_actions:
        raise ValueError("cannot add a state-only trajectory to the replay buffer")
    buffer.push(traj.states[:-1], traj.actions, traj.states[1:])
    return buffer


def sample_batch(buffer: ReplayBuffer, size: int, rng: np.random.Generator):
    """``size`` i.i.d. uniform draws with replacement, as (S, A, S2) arrays."""
    n = len(buffer)
    if n == 0:
        raise ValueError("cannot sample from an empty replay buffer")
    s, a, s2 = buffer.contents()
    idx = rng.integers(0, n, size=size)
    return s[idx], a[idx], s2[idx]


class InverseModel:
    """h(s_t, s_{t+1}) -> a_t.

    The network sees [s_t, diff_gain * (s_{t+1} - s_t)], a fixed linear
    re-encoding of the state pair that puts one-step changes on the same
    scale as the states.
    """

    def __init__(self, obs_dim: int, act_dim: int, hidden=(64, 64), rng: np.random.Generator | None = None,
                 lr: float = 1e-3, diff_gain: float = DEFAULT_DIFF_GAIN):
        self.spec = MlpSpec(2 * obs_dim, tuple(hidden), act_dim)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = approx.init_params(self.spec, rng)
        self.diff_gain = float(diff_gain)
        self.opt = approx.Adam(self.spec.n_params, lr=lr)
        self.version = 0

    @property
    def obs_dim(self) -> int:
        return self.spec.input_dim // 2

    @property
    def act_dim(self) -> int:
        return self.spec.output_dim

    def features(self, s, s2) -> np.ndarray:
        s, s2 = np.atleast_2d(s), np.atleast_2d(s2)
        if s.shape[-1] != self.obs_dim or s2.shape != s.shape:
            raise ValueError(f"inverse model expects state pairs of length {self.obs_dim}")
        return np.concatenate([s, self.diff_gain * (s2 - s)], axis=-1)

    def predict_raw(self, s, s2) -> np.ndarray:
        return approx.mlp_forward(self.spec, self.params, self.features(s, s2))

    def predict(self, s, s2) -> np.ndarray:
        """Predicted actions clamped to the action bounds [-1, 1]."""
        return np.clip(self.predict_raw(s, s2), -1.0, 1.0)

    def header(self) -> dict:
        return {"kind": "inverse_model", "net": self.spec.to_dict(), "diff_gain": self.diff_gain}


class InverseEnsemble:
    def __init__(self, models: list[InverseModel]):
        if not models:
            raise ValueError("an ensemble needs at least one model")
        if len({m.spec for m in models}) != 1:
            raise ValueError("ensemble members must share one spec")
        self.models = list(models)

    @property
    def obs_dim(self) -> int:
        return self.models[0].obs_dim

    @property
    def version(self) -> int:
        return min(m.version for m in self.models)

    def predict(self, s, s2) -> np.ndarray:
        mean = np.mean([m.predict_raw(s, s2) for m in self.models], axis=0)
        return np.clip(mean, -1.0, 1.0)


def inv_loss(model: InverseModel, batch) -> float:
    """Mean squared Euclidean error between h(s, s') and the stored action."""
    s, a, s2 = batch
    if len(s) == 0:
        raise ValueError("empty batch")
    err = model.predict_raw(s, s2) - np.atleast_2d(a)
    return float(np.mean(np.sum(err * err, axis=1)))


def inv_loss_grad(model: InverseModel, batch) -> tuple[float, np.ndarray]:
    s, a, s2 = batch
    out, cache = approx.forward_with_cache(model.spec, model.params, model.features(s, s2))
    err = out - np.atleast_2d(a)
    n = err.shape[0]
    loss = float(np.sum(err * err) / n)
    return loss, approx.backward(model.spec, cache, 2.0 * err / n)


def inv_train_step(model: InverseModel, batch, lr: float | None = None) -> float:
    """One Adam step on the inverse loss; returns the loss before the step."""
    loss, grad = inv_loss_grad(model, batch)
    model.params = model.opt.step(model.params, grad, lr=lr)
    model.version += 1
    return loss


def _relabel_with(demos: DemoSet, predictor) -> DemoSet:
    if not demos.state_only:
        raise ValueError("relabel expects a state-only demo set")
    if demos.trajectories and demos.obs_dim != predictor.obs_dim:
        raise ValueError(f"demo states have length {demos.obs_dim}, model expects {predictor.obs_dim}")
    act_dim = predictor.models[0].act_dim if isinstance(predictor, InverseEnsemble) else predictor.act_dim
    trajs = []
    for t in demos.trajectories:
        acts = predictor.predict(t.states[:-1], t.states[1:]) if len(t) else np.zeros((0, act_dim))
        trajs.append(Trajectory(t.states, acts))
    return DemoSet(tuple(trajs), demos.env_fingerprint, False, act_dim)


def relabel(demos: DemoSet, model: InverseModel) -> DemoSet:
    """Complete state-only demos with clamped inverse-model actions."""
    return _relabel_with(demos, model)


def ensemble_relabel(demos: DemoSet, ensemble: InverseEnsemble) -> DemoSet:
    return _relabel_with(demos, ensemble)
