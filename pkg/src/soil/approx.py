"""Numpy function approximators with hand-written gradients.

Every learnable object in the package (policy mean, value baseline, inverse
model, discriminator) is a tanh MLP whose parameters live in one flat float64
vector.  Keeping parameters flat makes the Fisher / conjugate-gradient algebra
of the natural policy gradient straightforward.

Parameter layout per layer: weight matrix ``W`` of shape (fan_out, fan_in)
flattened row-major, followed by the bias ``b`` of length fan_out.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
DEFAULT_DAMPING = 1e-2
_LOG_2PI = math.log(2.0 * math.pi)

CHECKPOINT_FORMAT = "soil-params"
CHECKPOINT_VERSION = 1


class ContractError(ValueError):
    """Raised when an operation receives arguments of the wrong shape or domain."""


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        dims = (self.input_dim, *self.hidden, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ContractError(f"all MLP dims must be >= 1, got {dims}")
        if self.activation != "tanh":
            raise ContractError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) for each affine layer."""
        dims = (self.input_dim, *self.hidden, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in self.layer_dims)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(int(d["input_dim"]), tuple(d["hidden"]), int(d["output_dim"]), d.get("activation", "tanh"))


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Weights uniform in +-1/sqrt(fan_in), biases zero."""
    chunks = []
    for fan_in, fan_out in spec.layer_dims:
        bound = 1.0 / math.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def unpack(spec: MlpSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into (W, b) views, no copies."""
    _check_params(spec, params)
    layers = []
    i = 0
    for fan_in, fan_out in spec.layer_dims:
        W = params[i:i + fan_in * fan_out].reshape(fan_out, fan_in)
        i += fan_in * fan_out
        b = params[i:i + fan_out]
        i += fan_out
        layers.append((W, b))
    return layers


def _check_params(spec: MlpSpec, params: np.ndarray) -> None:
    if params.ndim != 1 or params.shape[0] != spec.n_params:
        raise ContractError(f"expected {spec.n_params} parameters, got shape {params.shape}")


def _as_batch(spec: MlpSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ContractError(f"expected input of length {spec.input_dim}, got shape {x.shape}")
    return X, single


def mlp_forward(spec: MlpSpec, params: np.ndarray, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows."""
    X, single = _as_batch(spec, x)
    layers = unpack(spec, params)
    h = X
    for k, (W, b) in enumerate(layers):
        h = h @ W.T + b
        if k < len(layers) - 1:
            h = np.tanh(h)
    return h[0] if single else h


def forward_with_cache(spec: MlpSpec, params: np.ndarray, X: np.ndarray):
    """Batched forward pass keeping the per-layer inputs and tanh slopes needed by `backward`."""
    X, _ = _as_batch(spec, X)
    layers = unpack(spec, params)
    inputs, slopes = [], [None]
    h = X
    for k, (W, b) in enumerate(layers):
        inputs.append(h)
        h = h @ W.T + b
        if k < len(layers) - 1:
            h = np.tanh(h)
            slopes.append(1.0 - h * h)
    return h, (layers, inputs, slopes)


def backward(spec: MlpSpec, cache, grad_out: np.ndarray, per_sample: bool = False) -> np.ndarray:
    """Backpropagate dL/d(output) to a parameter gradient.

    With ``per_sample=False`` the gradient is summed over the batch and has
    shape (n_params,); otherwise one row per sample, shape (N, n_params).
    """
    layers, inputs, slopes = cache
    delta = np.asarray(grad_out, dtype=np.float64)
    n = delta.shape[0]
    pieces: list[np.ndarray] = []
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        h_in = inputs[k]
        if per_sample:
            gW = (delta[:, :, None] * h_in[:, None, :]).reshape(n, -1)
            pieces.append(delta)
            pieces.append(gW)
        else:
            pieces.append(delta.sum(axis=0))
            pieces.append((delta.T @ h_in).ravel())
        if k > 0:
            delta = (delta @ W) * slopes[k]
    pieces.reverse()
    return np.concatenate(pieces, axis=1 if per_sample else 0)


def jvp(spec: MlpSpec, cache, dparams: np.ndarray) -> np.ndarray:
    """Forward-mode derivative of the batch outputs along parameter direction ``dparams``."""
    layers, inputs, slopes = cache
    dlayers = unpack(spec, np.asarray(dparams, dtype=np.float64))
    for k, ((W, _), (dW, db)) in enumerate(zip(layers, dlayers)):
        dpre = inputs[k] @ dW.T + db
        if k > 0:
            dpre += dh @ W.T
        if k < len(layers) - 1:
            dh = dpre * slopes[k + 1]
    return dpre


def input_gradient(spec: MlpSpec, cache, grad_out: np.ndarray) -> np.ndarray:
    layers, _, slopes = cache
    delta = np.asarray(grad_out, dtype=np.float64)
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        delta = delta @ W
        if k > 0:
            delta = delta * slopes[k]
    return delta


# --------------------------------------------------------------------------
# Diagonal Gaussian policy


@dataclass
class GaussianPolicy:
    """MLP mean with a state-independent log standard deviation.

    ``params`` holds the mean-network parameters followed by ``action_dim``
    log-std entries.  The effective log-std is clipped to
    [LOG_STD_MIN, LOG_STD_MAX].
    """

    mean_spec: MlpSpec
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.n_params,):
            raise ContractError(f"policy expects {self.n_params} parameters, got {self.params.shape}")

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, hidden: Sequence[int] = (64, 64),
               rng: np.random.Generator | None = None, init_log_std: float = 0.0) -> "GaussianPolicy":
        spec = MlpSpec(obs_dim, tuple(hidden), act_dim)
        rng = rng if rng is not None else np.random.default_rng(0)
        theta = np.concatenate([init_params(spec, rng), np.full(act_dim, float(init_log_std))])
        return cls(spec, theta)

    @property
    def obs_dim(self) -> int:
        return self.mean_spec.input_dim

    @property
    def act_dim(self) -> int:
        return self.mean_spec.output_dim

    @property
    def n_params(self) -> int:
        return self.mean_spec.n_params + self.mean_spec.output_dim

    @property
    def mean_params(self) -> np.ndarray:
        return self.params[:self.mean_spec.n_params]

    @property
    def log_std(self) -> np.ndarray:
        return np.clip(self.params[self.mean_spec.n_params:], LOG_STD_MIN, LOG_STD_MAX)

    def with_params(self, params: np.ndarray) -> "GaussianPolicy":
        return GaussianPolicy(self.mean_spec, np.array(params, dtype=np.float64))

    def copy(self) -> "GaussianPolicy":
        return self.with_params(self.params.copy())

    def mean(self, s) -> np.ndarray:
        return mlp_forward(self.mean_spec, self.mean_params, s)

    def header(self) -> dict:
        return {"kind": "gaussian_policy", "mean_net": self.mean_spec.to_dict(), "action_dim": self.act_dim}


def _check_finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ContractError("non-finite input")


def _sa_batch(policy: GaussianPolicy, s, a):
    S = np.asarray(s, dtype=np.float64)
    A = np.asarray(a, dtype=np.float64)
    single = S.ndim == 1
    if single:
        S, A = S[None, :], A[None, :]
    if S.ndim != 2 or S.shape[1] != policy.obs_dim:
        raise ContractError(f"state must have length {policy.obs_dim}, got shape {np.shape(s)}")
    if A.shape != (S.shape[0], policy.act_dim):
        raise ContractError(f"action must have length {policy.act_dim}, got shape {np.shape(a)}")
    _check_finite(S, A)
    return S, A, single


def log_prob(policy: GaussianPolicy, s, a):
    """Log density of action(s) ``a`` under the policy at state(s) ``s``."""
    S, A, single = _sa_batch(policy, s, a)
    mu = mlp_forward(policy.mean_spec, policy.mean_params, S)
    log_std = policy.log_std
    z = (A - mu) * np.exp(-log_std)
    lp = -0.5 * np.sum(z * z, axis=1) - np.sum(log_std) - 0.5 * policy.act_dim * _LOG_2PI
    return float(lp[0]) if single else lp


def _score_parts(policy: GaussianPolicy, S: np.ndarray, A: np.ndarray):
    mu, cache = forward_with_cache(policy.mean_spec, policy.mean_params, S)
    raw = policy.params[policy.mean_spec.n_params:]
    inv_var = np.exp(-2.0 * policy.log_std)
    resid = A - mu
    d_mu = resid * inv_var
    d_log_std = resid * resid * inv_var - 1.0
    # no gradient through an active clip
    d_log_std = d_log_std * ((raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX))
    return cache, d_mu, d_log_std


def grad_log_prob(policy: GaussianPolicy, s, a) -> np.ndarray:
    """Gradient of log pi(a|s) with respect to all policy parameters.

    For a single (s, a) pair returns a vector of length ``n_params``; for
    batches returns one row per pair.
    """
    S, A, single = _sa_batch(policy, s, a)
    cache, d_mu, d_log_std = _score_parts(policy, S, A)
    g_mean = backward(policy.mean_spec, cache, d_mu, per_sample=True)
    G = np.concatenate([g_mean, d_log_std], axis=1)
    return G[0] if single else G


def mean_grad_log_prob(policy: GaussianPolicy, S, A, weights=None) -> np.ndarray:
    """(1/N) sum_n w_n grad log pi(a_n|s_n), computed with one backward pass."""
    S, A, _ = _sa_batch(policy, S, A)
    n = S.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ContractError("weights must have one entry per pair")
    cache, d_mu, d_log_std = _score_parts(policy, S, A)
    g_mean = backward(policy.mean_spec, cache, d_mu * w[:, None])
    return np.concatenate([g_mean, w @ d_log_std]) / n


def sample_action(policy: GaussianPolicy, s, rng: np.random.Generator) -> np.ndarray:
    """a = mu(s) + sigma * eps with eps drawn from ``rng``."""
    mu = policy.mean(s)
    eps = rng.standard_normal(np.shape(mu))
    return mu + np.exp(policy.log_std) * eps


def mean_kl(policy_old: GaussianPolicy, policy_new: GaussianPolicy, states) -> float:
    """Average KL(pi_old(.|s) || pi_new(.|s)) over ``states`` (closed form)."""
    S = np.asarray(states, dtype=np.float64)
    if S.ndim == 1:
        S = S[None, :]
    if S.shape[0] == 0:
        raise ContractError("mean_kl needs at least one state")
    if policy_old.act_dim != policy_new.act_dim:
        raise ContractError("policies have different action dims")
    if policy_old.mean_spec == policy_new.mean_spec and np.array_equal(policy_old.params, policy_new.params):
        return 0.0
    mu0, mu1 = policy_old.mean(S), policy_new.mean(S)
    ls0, ls1 = policy_old.log_std, policy_new.log_std
    var0, var1 = np.exp(2 * ls0), np.exp(2 * ls1)
    kl = np.sum(ls1 - ls0 + (var0 + (mu0 - mu1) ** 2) / (2.0 * var1) - 0.5, axis=1)
    return float(np.mean(kl))


def fisher_vector_product(policy: GaussianPolicy, states, actions, v, damping: float = DEFAULT_DAMPING) -> np.ndarray:
    """Empirical Fisher times ``v`` plus damping.

    F = (1/|S|) sum_s g_s g_s^T with g_s the score at the stored action.
    """
    return fisher_operator(policy, states, actions, damping)(v)


def fisher_operator(policy: GaussianPolicy, states, actions, damping: float = DEFAULT_DAMPING):
    """Matrix-free v -> F v + damping v.

    G v is one forward-mode pass through the mean net and G^T u one backward
    pass, so the (N, n_params) score matrix is never formed.
    """
    S, A, _ = _sa_batch(policy, np.atleast_2d(states), np.atleast_2d(actions))
    cache, d_mu, d_log_std = _score_parts(policy, S, A)
    n, k, p = S.shape[0], policy.mean_spec.n_params, policy.n_params

    def apply(v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (p,):
            raise ContractError(f"vector must have length {p}, got {v.shape}")
        u = np.sum(d_mu * jvp(policy.mean_spec, cache, v[:k]), axis=1) + d_log_std @ v[k:]
        out = np.concatenate([backward(policy.mean_spec, cache, d_mu * u[:, None]), u @ d_log_std])
        return out / n + damping * v

    return apply


def fisher_from_scores(G: np.ndarray, damping: float = DEFAULT_DAMPING):
    """Return v -> (G^T G / N) v + damping v for a precomputed score matrix."""
    n, p = G.shape

    def apply(v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (p,):
            raise ContractError(f"vector must have length {p}, got {v.shape}")
        return G.T @ (G @ v) / n + damping * v

    return apply


# --------------------------------------------------------------------------
# Optimizer


class Adam:
    """Adam on a flat parameter vector (minimisation)."""

    def __init__(self, n_params: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float | None = None) -> np.ndarray:
        lr = self.lr if lr is None else lr
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return params - lr * m_hat / (np.sqrt(v_hat) + self.eps)


# --------------------------------------------------------------------------
# Checkpoints: one JSON header line, then little-endian float64 values.


def save_params(path, params: np.ndarray, header: dict) -> None:
    params = np.asarray(params, dtype="<f8")
    if not np.all(np.isfinite(params)):
        raise ContractError("refusing to save non-finite parameters")
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "count": int(params.size), **header}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8") + b"\n" + params.tobytes()
    Path(path).write_bytes(blob)


def load_params(path) -> tuple[np.ndarray, dict]:
    blob = Path(path).read_bytes()
    nl = blob.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing checkpoint header")
    meta = json.loads(blob[:nl].decode("utf-8"))
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    data = np.frombuffer(blob[nl + 1:], dtype="<f8")
    if data.size != meta["count"]:
        raise ValueError(f"{path}: expected {meta['count']} values, found {data.size}")
    return data.astype(np.float64), meta


def save_policy(path, policy: GaussianPolicy, **extra) -> None:
    save_params(path, policy.params, {**policy.header(), **extra})


def load_policy(path) -> tuple[GaussianPolicy, dict]:
    params, meta = load_params(path)
    if meta.get("kind") != "gaussian_policy":
        raise ValueError(f"{path}: checkpoint does not hold a policy")
    return GaussianPolicy(MlpSpec.from_dict(meta["mean_net"]), params), meta
