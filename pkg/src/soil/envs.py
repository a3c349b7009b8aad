"""Deterministic planar relocation environments.

Two agents share one task: move to an object, grasp it, carry it to a goal.

* ``point_relocate``: a point mass pushed by a 2-D force.
* ``arm_relocate``: a planar arm with 1-3 revolute joints driven by torques.

The last action channel is the grasp command.  All functions accept either a
single state or a batch (leading axes broadcast), so rollouts of many
episodes advance with one call.

Constants (SI units)
--------------------
=========================  ==========================================
point mass                 POINT_MASS = 1.0 kg
point force scale          FORCE_SCALE = 4.0 N per unit action
point arena                |p_x|, |p_y| <= ARENA = 1.0 m (velocity zeroed at wall)
arm link lengths           LINK_LENGTHS = (0.3, 0.25, 0.2) m
arm joint inertia          LINK_INERTIA * (links outboard of joint) * mass
arm torque scale           TORQUE_SCALE = 1.0
arm joint damping          JOINT_DAMPING = 2.0 1/s
grasp radius               ball 0.10, box 0.07, slippery 0.10 m
slip speed                 slippery object drops above 0.6 m/s
grasp threshold            grasp channel > 0.5 grasps / holds
carry bonus                1.0 per step while attached
success                    |o - g| < 0.05 m, +10.0 per step
=========================  ==========================================

Reset boxes: point agent starts at rest at the origin, object uniform in
[-0.5, 0.5] x [0.25, 0.55], goal uniform in [-0.5, 0.5] x [-0.55, -0.25].
The arm starts at rest at ``ARM_Q0``, object uniform in
[0.15, 0.4] x [0.1, 0.35], goal uniform in [0.15, 0.4] x [-0.35, -0.1]
(inside the reach of the two-link arm).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace

import numpy as np

KINDS = ("point_relocate", "arm_relocate")
OBJECT_KINDS = ("ball", "box", "slippery")

POINT_MASS = 1.0
FORCE_SCALE = 4.0
ARENA = 1.0

MAX_LINKS = 3
LINK_LENGTHS = np.array([0.3, 0.25, 0.2])
LINK_INERTIA = 0.1
TORQUE_SCALE = 1.0
JOINT_DAMPING = 2.0
ARM_Q0 = np.array([0.5, -1.0, -0.5])

GRASP_RADIUS = {"ball": 0.10, "box": 0.07, "slippery": 0.10}
SLIP_SPEED = 0.6
GRASP_THRESHOLD = 0.5
CARRY_BONUS = 1.0
SUCCESS_BONUS = 10.0
SUCCESS_RADIUS = 0.05
MAX_STEP_REWARD = CARRY_BONUS + SUCCESS_BONUS

POINT_OBJECT_BOX = ((-0.5, 0.25), (0.5, 0.55))
POINT_GOAL_BOX = ((-0.5, -0.55), (0.5, -0.25))
ARM_OBJECT_BOX = ((0.15, 0.1), (0.4, 0.35))
ARM_GOAL_BOX = ((0.15, -0.35), (0.4, -0.1))


@dataclass(frozen=True)
class EnvSpec:
    kind: str = "point_relocate"
    mass_multiplier: float = 1.0
    n_links: int = 3
    object_kind: str = "ball"
    horizon: int = 100
    dt: float = 0.05

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown env kind {self.kind!r}; expected one of {KINDS}")
        if self.object_kind not in OBJECT_KINDS:
            raise ValueError(f"unknown object kind {self.object_kind!r}; expected one of {OBJECT_KINDS}")
        if not (np.isfinite(self.mass_multiplier) and self.mass_multiplier > 0):
            raise ValueError("mass_multiplier must be > 0")
        if isinstance(self.n_links, bool) or int(self.n_links) != self.n_links or not 1 <= self.n_links <= MAX_LINKS:
            raise ValueError(f"n_links must be an integer in [1, {MAX_LINKS}]")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ValueError("horizon must be a positive integer")
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ValueError("dt must be > 0")
        object.__setattr__(self, "mass_multiplier", float(self.mass_multiplier))
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "n_links", int(self.n_links))
        object.__setattr__(self, "horizon", int(self.horizon))

    @property
    def n_kin(self) -> int:
        """Number of kinematic slots (positions) in the observation."""
        return 2 if self.kind == "point_relocate" else MAX_LINKS

    @property
    def obs_dim(self) -> int:
        if self.kind == "point_relocate":
            return 2 + 2 + 2 + 2 + 1
        return MAX_LINKS * 2 + 2 + 2 + 2 + 1

    @property
    def act_dim(self) -> int:
        return 3 if self.kind == "point_relocate" else self.n_links + 1

    @property
    def grasp_radius(self) -> float:
        return GRASP_RADIUS[self.object_kind]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown env fields: {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def variant(spec: EnvSpec, **changes) -> EnvSpec:
    """Copy of ``spec`` with one or more of mass_multiplier / n_links / object_kind changed."""
    allowed = {"mass_multiplier", "n_links", "object_kind"}
    bad = set(changes) - allowed
    if bad:
        raise ValueError(f"variant can only change {sorted(allowed)}, got {sorted(bad)}")
    if "n_links" in changes and spec.kind != "arm_relocate":
        raise ValueError("n_links variants only apply to arm_relocate")
    return replace(spec, **changes)


@dataclass
class EnvState:
    """Physical state; every field may carry leading batch axes.

    ``kin``/``vel`` are the agent positions/velocities: (x, y) for the point
    mass, joint angles padded to MAX_LINKS for the arm (slots of absent links
    stay zero).
    """

    kin: np.ndarray
    vel: np.ndarray
    obj: np.ndarray
    goal: np.ndarray
    attached: np.ndarray
    t: int = 0

    def copy(self) -> "EnvState":
        return EnvState(self.kin.copy(), self.vel.copy(), self.obj.copy(), self.goal.copy(),
                        self.attached.copy(), self.t)

    def index(self, i) -> "EnvState":
        return EnvState(self.kin[i], self.vel[i], self.obj[i], self.goal[i], self.attached[i], self.t)


def _uniform_box(rng: np.random.Generator, box) -> np.ndarray:
    lo, hi = box
    return rng.uniform(lo, hi)


def reset(spec: EnvSpec, rng: np.random.Generator) -> EnvState:
    """Agent at rest in its home configuration, object and goal sampled uniformly."""
    if spec.kind == "point_relocate":
        kin = np.zeros(2)
        obj = _uniform_box(rng, POINT_OBJECT_BOX)
        goal = _uniform_box(rng, POINT_GOAL_BOX)
    else:
        kin = np.zeros(MAX_LINKS)
        kin[:spec.n_links] = ARM_Q0[:spec.n_links]
        obj = _uniform_box(rng, ARM_OBJECT_BOX)
        goal = _uniform_box(rng, ARM_GOAL_BOX)
    return EnvState(kin, np.zeros_like(kin), obj, goal, np.array(False), 0)


def reset_batch(spec: EnvSpec, rngs) -> EnvState:
    states = [reset(spec, r) for r in rngs]
    return stack_states(states)


def stack_states(states) -> EnvState:
    return EnvState(
        np.stack([s.kin for s in states]),
        np.stack([s.vel for s in states]),
        np.stack([s.obj for s in states]),
        np.stack([s.goal for s in states]),
        np.stack([np.asarray(s.attached) for s in states]),
        states[0].t,
    )


def arm_kinematics(spec: EnvSpec, q: np.ndarray, qd: np.ndarray | None = None):
    """Effector position (and velocity if ``qd`` is given) of the planar arm."""
    n = spec.n_links
    L = LINK_LENGTHS[:n]
    phi = np.cumsum(q[..., :n], axis=-1)
    cos, sin = np.cos(phi), np.sin(phi)
    eff = np.stack([np.sum(L * cos, axis=-1), np.sum(L * sin, axis=-1)], axis=-1)
    if qd is None:
        return eff
    phid = np.cumsum(qd[..., :n], axis=-1)
    eff_vel = np.stack([-np.sum(L * sin * phid, axis=-1), np.sum(L * cos * phid, axis=-1)], axis=-1)
    return eff, eff_vel


def arm_jacobian(spec: EnvSpec, q: np.ndarray) -> np.ndarray:
    """d(effector)/dq for the active joints, shape (..., 2, n_links)."""
    n = spec.n_links
    L = LINK_LENGTHS[:n]
    phi = np.cumsum(q[..., :n], axis=-1)
    lx = -L * np.sin(phi)
    ly = L * np.cos(phi)
    # joint j moves every link from j outward
    jx = np.flip(np.cumsum(np.flip(lx, -1), -1), -1)
    jy = np.flip(np.cumsum(np.flip(ly, -1), -1), -1)
    return np.stack([jx, jy], axis=-2)


def joint_inertia(spec: EnvSpec) -> np.ndarray:
    outboard = np.arange(spec.n_links, 0, -1, dtype=np.float64)
    return LINK_INERTIA * outboard * spec.mass_multiplier


def effector(spec: EnvSpec, state: EnvState) -> np.ndarray:
    if spec.kind == "point_relocate":
        return state.kin
    return arm_kinematics(spec, state.kin)


def effector_velocity(spec: EnvSpec, state: EnvState) -> np.ndarray:
    if spec.kind == "point_relocate":
        return state.vel
    return arm_kinematics(spec, state.kin, state.vel)[1]


def observe(spec: EnvSpec, state: EnvState) -> np.ndarray:
    """Flat observation [kinematic state, (arm: effector), object, goal, attached]."""
    parts = [state.kin, state.vel]
    if spec.kind == "arm_relocate":
        parts.append(arm_kinematics(spec, state.kin))
    parts += [state.obj, state.goal, np.asarray(state.attached, dtype=np.float64)[..., None]]
    return np.concatenate(parts, axis=-1)


def point_dynamics(p, v, force, mass: float, force_scale: float, dt: float):
    """One semi-implicit Euler step of a point mass (no arena contact)."""
    v = v + (force_scale * force / mass) * dt
    return p + v * dt, v


def step(spec: EnvSpec, state: EnvState, action):
    """Advance one control step.

    Returns ``(next_state, reward, done)``.  Pure: ``state`` is not modified.
    """
    a = np.asarray(action, dtype=np.float64)
    if a.shape[-1] != spec.act_dim:
        raise ValueError(f"action must have {spec.act_dim} entries, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite action")
    a = np.clip(a, -1.0, 1.0)
    grasp = a[..., -1]
    dt = spec.dt

    if spec.kind == "point_relocate":
        p, v = point_dynamics(state.kin, state.vel, a[..., :2], POINT_MASS * spec.mass_multiplier, FORCE_SCALE, dt)
        hit = np.abs(p) > ARENA
        p = np.clip(p, -ARENA, ARENA)
        v = np.where(hit, 0.0, v)
        kin, vel = p, v
        eff, eff_vel = p, v
    else:
        n = spec.n_links
        accel = TORQUE_SCALE * a[..., :n] / joint_inertia(spec)
        qd = state.vel.copy()
        q = state.kin.copy()
        qd[..., :n] = qd[..., :n] + (accel - JOINT_DAMPING * qd[..., :n]) * dt
        q[..., :n] = q[..., :n] + qd[..., :n] * dt
        kin, vel = q, qd
        eff, eff_vel = arm_kinematics(spec, q, qd)

    held = np.asarray(state.attached, dtype=bool)
    dist = np.linalg.norm(eff - state.obj, axis=-1)
    closing = grasp > GRASP_THRESHOLD
    attached = (held & closing) | (~held & closing & (dist < spec.grasp_radius))
    if spec.object_kind == "slippery":
        attached = attached & (np.linalg.norm(eff_vel, axis=-1) <= SLIP_SPEED)
    obj = np.where(attached[..., None], eff, state.obj)

    nxt = EnvState(kin, vel, obj, state.goal.copy(), attached, state.t + 1)
    reward = reward_of(spec, nxt, eff)
    done = nxt.t >= spec.horizon
    return nxt, reward, done


def reward_of(spec: EnvSpec, state: EnvState, eff: np.ndarray | None = None):
    eff = effector(spec, state) if eff is None else eff
    d_obj = np.linalg.norm(eff - state.obj, axis=-1)
    d_goal = np.linalg.norm(state.obj - state.goal, axis=-1)
    r = np.where(state.attached, CARRY_BONUS - d_goal, -d_obj)
    return r + SUCCESS_BONUS * (d_goal < SUCCESS_RADIUS)


def is_success(state: EnvState) -> np.ndarray:
    return np.linalg.norm(state.obj - state.goal, axis=-1) < SUCCESS_RADIUS
