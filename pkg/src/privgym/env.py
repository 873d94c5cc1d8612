"""Tabletop manipulation MDP: push-to-edge-and-grasp and walled pivot
scenes over the planar gripper simulation.

Observation (18 channels, float64):

    [0:4]   q_R   palm x, palm z, palm angle, aperture
    [4:7]   q_O   object x, z, angle
    [7:11]  qd_R
    [11:14] qd_O
    [14:16] goal position (x, z)
    [16:18] object-to-palm delta (x_O - x_R, z_O - z_R)

Gaussian noise of std ``randomization.obs_noise_std`` is added at
emission only; internal state is never perturbed.

Action (6 channels in [-1, 1]):

    0 palm force x   (+-20 N)       3 aperture rate (+-0.1 m/s)
    1 palm force z   (+-20 N)       4 virtual force x (+-f_virtual_max)
    2 palm torque    (+-2 N m)      5 virtual force y (+-f_virtual_max)

The action dimension is fixed across curriculum stages; virtual-force
channels are routed through the privilege gate and are identically zero
outside the VirtualForce stage.

Episodes end on one of: success held ``hold_steps`` consecutive steps,
length truncation, or solver truncation. Privileges (stage, delta_R,
alpha) are applied per environment at episode reset, never mid-episode.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import IO

import numpy as np

from . import kernels as K
from .curriculum import CurriculumStage
from .physics import World, SystemState
from .privilege import F_VIRTUAL_MAX

OBS_DIM = 18
ACT_DIM = 6

_STAGE_CODE = {CurriculumStage.RELAXATION: 0,
               CurriculumStage.VIRTUAL_FORCE: 1,
               CurriculumStage.NORMAL: 2}
_CODE_STAGE = {v: k for k, v in _STAGE_CODE.items()}


@dataclass(frozen=True)
class Randomization:
    object_x_range: tuple[float, float] = (-0.3, 0.3)
    object_size_jitter: float = 0.0
    obs_noise_std: float = 0.0


@dataclass(frozen=True)
class SceneConfig:
    """Scene geometry, reward weights, and episode parameters."""

    table_half_width: float = 0.5
    table_height: float = 0.4
    object_half_extents: tuple[float, float] = (0.05, 0.03)
    aperture_max: float = 0.08
    walls_enabled: bool = False
    wall_height: float = 0.04
    goal_height: float = 0.2
    episode_len: int = 300
    randomization: Randomization = field(default_factory=Randomization)
    hold_steps: int = 10
    lift_threshold: float = 0.04
    success_dist: float = 0.05
    success_height: float = 0.1
    success_grip_force: float = 0.1
    w_f: float = 0.1
    w_l: float = 0.5
    w_k: float = 1.0
    w_p: float = 0.01
    w_b: float = 10.0
    f_virtual_max: float = F_VIRTUAL_MAX
    gate_delta_p: float = 10.0
    gate_delta_v: float = 5.0
    palm_spawn_height: float = 0.15
    dt: float = 1.0 / 120.0
    substeps: int = 4
    friction_coeff: float = 0.5
    # viscous damping makes the wrench-driven gripper controllable
    # (terminal speeds ~4 m/s and ~25 rad/s at full command)
    robot_damping: float = 10.0
    robot_ang_damping: float = 40.0
    workspace_x: tuple[float, float] = (-0.8, 0.8)
    workspace_z: tuple[float, float] = (0.02, 1.0)
    # test instrumentation: if >= 0, episodes terminate as held successes
    # after this many steps regardless of physics
    force_success_after: int = -1

    def __post_init__(self):
        if 2.0 * self.object_half_extents[0] <= self.aperture_max:
            raise ValueError("flat object must be wider than the gripper "
                             "opening; the task is non-prehensile by "
                             "construction")
        if min(self.object_half_extents) <= 0.0 or self.table_half_width <= 0:
            raise ValueError("extents must be positive")

    @property
    def goal(self) -> tuple[float, float]:
        return (0.0, self.table_height + self.goal_height)


def push_scene(**overrides) -> SceneConfig:
    return SceneConfig(**overrides)


def pivot_scene(**overrides) -> SceneConfig:
    overrides.setdefault("walls_enabled", True)
    return SceneConfig(**overrides)


def scene_by_name(name: str, **overrides) -> SceneConfig:
    if name == "push":
        return push_scene(**overrides)
    if name == "pivot":
        return pivot_scene(**overrides)
    raise ValueError(f"unknown scene '{name}' (expected push|pivot)")


def make_world(scene: SceneConfig,
               object_half_extents: tuple[float, float] | None = None,
               ) -> World:
    return World(
        table_half_width=scene.table_half_width,
        table_height=scene.table_height,
        object_half_extents=(object_half_extents
                             or scene.object_half_extents),
        aperture_max=scene.aperture_max,
        walls_enabled=scene.walls_enabled,
        wall_half_extents=(0.01, scene.wall_height / 2.0),
        friction_coeff=scene.friction_coeff,
        robot_lin_damping=scene.robot_damping,
        robot_ang_damping=scene.robot_ang_damping,
        aperture_damping=scene.robot_damping,
        workspace_x=scene.workspace_x,
        workspace_z=scene.workspace_z,
    )


@dataclass(frozen=True)
class RewardBreakdown:
    r_f: float
    r_l: float
    r_k: float
    r_p: float
    r_b: float
    r_total: float

    @staticmethod
    def of(r_f, r_l, r_k, r_p, r_b) -> "RewardBreakdown":
        return RewardBreakdown(r_f, r_l, r_k, r_p, r_b,
                               r_f + r_l + r_k + r_p + r_b)


def action_scale(scene: SceneConfig) -> np.ndarray:
    return np.array([20.0, 20.0, 2.0, 0.1,
                     scene.f_virtual_max, scene.f_virtual_max])


def reward_terms(scene: SceneConfig, palm_xz, obj_xz, obj_z, action,
                 prev_action, finger_forces):
    """Vectorized five-term reward; every argument is batched on axis 0."""
    goal = np.asarray(scene.goal)
    dist_po = np.hypot(obj_xz[:, 0] - palm_xz[:, 0],
                       obj_xz[:, 1] - palm_xz[:, 1])
    dist_og = np.hypot(obj_xz[:, 0] - goal[0], obj_xz[:, 1] - goal[1])
    lifted = obj_z > scene.table_height + scene.lift_threshold
    r_f = scene.w_f * (1.0 - np.tanh(10.0 * dist_po))
    r_l = scene.w_l * lifted
    r_k = scene.w_k * (1.0 - np.tanh(10.0 * dist_og)) * lifted
    r_p = -scene.w_p * np.sum((action - prev_action) ** 2, axis=1)
    succ = success_mask(scene, obj_xz, finger_forces)
    r_b = scene.w_b * succ
    return r_f, r_l, r_k, r_p, r_b, succ


def success_mask(scene: SceneConfig, obj_xz, finger_forces) -> np.ndarray:
    """Success: object at the goal, above the table, held by both fingers."""
    goal = np.asarray(scene.goal)
    dist_og = np.hypot(obj_xz[:, 0] - goal[0], obj_xz[:, 1] - goal[1])
    return ((dist_og < scene.success_dist)
            & (obj_xz[:, 1] > scene.table_height + scene.success_height)
            & (finger_forces[:, 0] > scene.success_grip_force)
            & (finger_forces[:, 1] > scene.success_grip_force))


def compute_reward(prev_state: SystemState, state: SystemState,
                   prev_action: np.ndarray, action: np.ndarray,
                   goal: tuple[float, float],
                   scene: SceneConfig | None = None,
                   finger_forces: tuple[float, float] = (0.0, 0.0),
                   ) -> RewardBreakdown:
    """Single-transition reward. ``finger_forces`` are the per-finger
    normal contact forces on the object at ``state`` (the success bonus
    needs them; geometry alone cannot distinguish holding from flying).
    """
    if scene is None:
        scene = SceneConfig()
    if tuple(goal) != scene.goal:
        scene = dataclasses.replace(
            scene, goal_height=goal[1] - scene.table_height)
    palm = np.array([[state.q_r[0], state.q_r[1]]])
    obj = np.array([[state.q_o[0], state.q_o[1]]])
    ff = np.array([finger_forces], dtype=np.float64)
    r_f, r_l, r_k, r_p, r_b, _ = reward_terms(
        scene, palm, obj, obj[:, 1], np.asarray(action)[None, :],
        np.asarray(prev_action)[None, :], ff)
    return RewardBreakdown.of(float(r_f[0]), float(r_l[0]), float(r_k[0]),
                              float(r_p[0]), float(r_b[0]))


def is_success(state: SystemState, goal: tuple[float, float],
               scene: SceneConfig,
               finger_forces: tuple[float, float] = (0.0, 0.0)) -> bool:
    """Success predicate for one state (see ``success_mask``)."""
    if tuple(goal) != scene.goal:
        scene = dataclasses.replace(
            scene, goal_height=goal[1] - scene.table_height)
    obj = np.array([[state.q_o[0], state.q_o[1]]])
    ff = np.array([finger_forces], dtype=np.float64)
    return bool(success_mask(scene, obj, ff)[0])


class VecTabletopEnv:
    """Batch of independent environments stepped in lockstep.

    All instances share one immutable scene/world definition (modulo the
    per-env jittered object size) and own disjoint state. Curriculum
    privileges are set via :meth:`set_privileges` and take effect at each
    env's next reset.
    """

    def __init__(self, scene: SceneConfig, n_envs: int, seed: int,
                 stage: CurriculumStage = CurriculumStage.NORMAL,
                 delta_r: float = 0.0, alpha: float = 0.85,
                 hard_disable_virtual_force: bool = False):
        self.scene = scene
        self.n_envs = n_envs
        self.world = make_world(scene)
        self._params = self.world.params()
        self._scale = action_scale(scene)
        seq = np.random.SeedSequence(seed)
        self.rngs = [np.random.Generator(np.random.PCG64(s))
                     for s in seq.spawn(n_envs)]
        n = n_envs
        self.q = np.zeros((n, K.NDOF))
        self.v = np.zeros((n, K.NDOF))
        self.t = np.zeros(n)
        self.obj_he = np.tile(np.asarray(scene.object_half_extents), (n, 1))
        self.steps = np.zeros(n, dtype=np.int64)
        self.streak = np.zeros(n, dtype=np.int64)
        self.prev_action = np.zeros((n, ACT_DIM))
        self.ep_return = np.zeros(n)
        self.active_stage = np.full(n, _STAGE_CODE[stage], dtype=np.int64)
        self.active_relax = np.full(n, delta_r)
        self.active_alpha = np.full(n, alpha)
        self._pending = (_STAGE_CODE[stage], delta_r, alpha)
        self.hard_disable_virtual_force = hard_disable_virtual_force
        self._finger_forces = np.zeros((n, 2))
        self._ok = np.ones(n, dtype=np.bool_)
        self._residual = np.zeros(n)

    # -- lifecycle ---------------------------------------------------------

    def set_privileges(self, stage: CurriculumStage, delta_r: float,
                       alpha: float) -> None:
        """Queue privileges; each env picks them up at its next reset."""
        self._pending = (_STAGE_CODE[stage], delta_r, alpha)

    def _reset_env(self, e: int) -> None:
        rng = self.rngs[e]
        sc = self.scene
        lo, hi = sc.randomization.object_x_range
        x = rng.uniform(lo, hi)
        j = sc.randomization.object_size_jitter
        hx, hz = sc.object_half_extents
        if j > 0.0:
            hx *= 1.0 + rng.uniform(-j, j)
            hz *= 1.0 + rng.uniform(-j, j)
        self.obj_he[e] = (hx, hz)
        self.q[e] = (0.0, sc.table_height + sc.palm_spawn_height, 0.0,
                     sc.aperture_max, x, sc.table_height + hz, 0.0)
        self.v[e] = 0.0
        self.t[e] = 0.0
        self.steps[e] = 0
        self.streak[e] = 0
        self.prev_action[e] = 0.0
        self.ep_return[e] = 0.0
        self._finger_forces[e] = 0.0
        st, dr, al = self._pending
        self.active_stage[e] = st
        self.active_relax[e] = dr
        self.active_alpha[e] = al

    def reset(self) -> np.ndarray:
        for e in range(self.n_envs):
            self._reset_env(e)
        return self.observe()

    # -- observation -------------------------------------------------------

    def project_obs(self) -> np.ndarray:
        """Deterministic state projection (no noise).

        Angles are emitted wrapped to [-pi, pi); internal state keeps
        them unwrapped.
        """
        n = self.n_envs
        obs = np.empty((n, OBS_DIM))
        obs[:, 0:7] = self.q
        obs[:, 2] = np.mod(obs[:, 2] + np.pi, 2.0 * np.pi) - np.pi
        obs[:, 6] = np.mod(obs[:, 6] + np.pi, 2.0 * np.pi) - np.pi
        obs[:, 7:14] = self.v
        obs[:, 14] = self.scene.goal[0]
        obs[:, 15] = self.scene.goal[1]
        obs[:, 16] = self.q[:, 4] - self.q[:, 0]
        obs[:, 17] = self.q[:, 5] - self.q[:, 1]
        return obs

    def observe(self) -> np.ndarray:
        obs = self.project_obs()
        std = self.scene.randomization.obs_noise_std
        if std > 0.0:
            for e in range(self.n_envs):
                obs[e] += self.rngs[e].normal(0.0, std, OBS_DIM)
        return obs

    # -- stepping ----------------------------------------------------------

    def _gated_object_force(self, vf_cmd: np.ndarray) -> np.ndarray:
        """Route virtual-force commands through the stage + proximity gate."""
        if self.hard_disable_virtual_force:
            return np.zeros_like(vf_cmd)
        out = np.zeros_like(vf_cmd)
        in_stage = self.active_stage == _STAGE_CODE[
            CurriculumStage.VIRTUAL_FORCE]
        if not in_stage.any():
            return out
        dp = np.hypot(self.q[:, 4] - self.q[:, 0], self.q[:, 5] - self.q[:, 1])
        dv = np.hypot(self.v[:, 4] - self.v[:, 0], self.v[:, 5] - self.v[:, 1])
        open_ = ((dp < self.scene.gate_delta_p * self.active_alpha)
                 & (dv < self.scene.gate_delta_v * self.active_alpha))
        mask = in_stage & open_
        out[mask] = vf_cmd[mask]
        return out

    def step(self, actions: np.ndarray):
        """Advance every env one control step.

        Returns (obs, breakdown dict of per-term arrays, done, info dict).
        Done envs are auto-reset; their obs row is the post-reset
        observation and their episode outcome lands in
        ``info['episode_success']`` / ``info['episode_return']``.
        """
        actions = np.clip(np.asarray(actions, dtype=np.float64), -1.0, 1.0)
        if not np.isfinite(actions).all():
            raise ValueError("invalid state")
        phys = actions * self._scale
        wrench = np.ascontiguousarray(phys[:, 0:3])
        rate = np.ascontiguousarray(phys[:, 3])
        obj_force = np.ascontiguousarray(
            self._gated_object_force(phys[:, 4:6]))

        K.step_batch_kernel(self.q, self.v, self.obj_he, self._params,
                            wrench, rate, obj_force, self.active_relax,
                            self.scene.dt, self.scene.substeps,
                            self._ok, self._finger_forces, self._residual)
        self.t += self.scene.dt * self.scene.substeps
        self.steps += 1

        sc = self.scene
        palm = self.q[:, 0:2]
        obj = self.q[:, 4:6]
        r_f, r_l, r_k, r_p, r_b, succ = reward_terms(
            sc, palm, obj, obj[:, 1], actions, self.prev_action,
            self._finger_forces)
        if sc.force_success_after >= 0:
            succ = self.steps > sc.force_success_after
            r_b = sc.w_b * succ
        r_total = r_f + r_l + r_k + r_p + r_b
        self.ep_return += r_total
        self.streak = np.where(succ, self.streak + 1, 0)

        solver_fail = ~self._ok
        held = self.streak >= sc.hold_steps
        timeout = self.steps >= sc.episode_len
        done = held | timeout | solver_fail
        ep_success = held & ~solver_fail
        truncated = done & ~ep_success

        info = {
            "success": succ.copy(),
            "episode_success": ep_success,
            "truncated": truncated,
            "solver_fail": solver_fail.copy(),
            "episode_return": self.ep_return.copy(),
            "episode_len": self.steps.copy(),
            "finger_forces": self._finger_forces.copy(),
            "palm_obj_dist": np.hypot(obj[:, 0] - palm[:, 0],
                                      obj[:, 1] - palm[:, 1]),
            "lifted": obj[:, 1] > sc.table_height + sc.lift_threshold,
            "stage": self.active_stage.copy(),
            "delta_r": self.active_relax.copy(),
            "alpha": self.active_alpha.copy(),
        }
        self.prev_action = actions.copy()
        for e in np.flatnonzero(done):
            self._reset_env(e)
        obs = self.observe()
        breakdown = {"r_f": r_f, "r_l": r_l, "r_k": r_k, "r_p": r_p,
                     "r_b": r_b, "r_total": r_total}
        return obs, breakdown, done, info

    # -- checkpoint support --------------------------------------------------

    def get_state(self) -> dict:
        return {
            "q": self.q.copy(), "v": self.v.copy(), "t": self.t.copy(),
            "obj_he": self.obj_he.copy(), "steps": self.steps.copy(),
            "streak": self.streak.copy(),
            "prev_action": self.prev_action.copy(),
            "ep_return": self.ep_return.copy(),
            "active_stage": self.active_stage.copy(),
            "active_relax": self.active_relax.copy(),
            "active_alpha": self.active_alpha.copy(),
            "pending": np.asarray(self._pending, dtype=np.float64),
            "rng": json.dumps([g.bit_generator.state for g in self.rngs]),
        }

    def set_state(self, s: dict) -> None:
        self.q[:] = s["q"]
        self.v[:] = s["v"]
        self.t[:] = s["t"]
        self.obj_he[:] = s["obj_he"]
        self.steps[:] = s["steps"]
        self.streak[:] = s["streak"]
        self.prev_action[:] = s["prev_action"]
        self.ep_return[:] = s["ep_return"]
        self.active_stage[:] = s["active_stage"].astype(np.int64)
        self.active_relax[:] = s["active_relax"]
        self.active_alpha[:] = s["active_alpha"]
        pend = np.asarray(s["pending"])
        self._pending = (int(pend[0]), float(pend[1]), float(pend[2]))
        states = json.loads(s["rng"]) if isinstance(s["rng"], str) \
            else json.loads(str(s["rng"]))
        for g, st in zip(self.rngs, states):
            g.bit_generator.state = st


class TabletopEnv:
    """Single environment with spec-shaped step results (a view over a
    one-element :class:`VecTabletopEnv`, so it shares the exact code path
    of batched training)."""

    def __init__(self, scene: SceneConfig, seed: int = 0,
                 stage: CurriculumStage = CurriculumStage.NORMAL,
                 delta_r: float = 0.0, alpha: float = 0.85,
                 hard_disable_virtual_force: bool = False):
        self.vec = VecTabletopEnv(scene, 1, seed, stage=stage,
                                  delta_r=delta_r, alpha=alpha,
                                  hard_disable_virtual_force=
                                  hard_disable_virtual_force)
        self.scene = scene

    @property
    def state(self) -> SystemState:
        return SystemState.from_arrays(self.vec.q[0], self.vec.v[0],
                                       float(self.vec.t[0]))

    def reset(self) -> tuple[SystemState, np.ndarray]:
        obs = self.vec.reset()
        return self.state, obs[0]

    def step(self, action: np.ndarray):
        """Returns (state, obs, RewardBreakdown, done, info)."""
        obs, br, done, info = self.vec.step(np.asarray(action)[None, :])
        breakdown = RewardBreakdown.of(
            float(br["r_f"][0]), float(br["r_l"][0]), float(br["r_k"][0]),
            float(br["r_p"][0]), float(br["r_b"][0]))
        single = {k: v[0] for k, v in info.items()}
        single["success"] = bool(single["episode_success"]) if done[0] \
            else bool(single["success"])
        single["truncated"] = bool(single["truncated"])
        return self.state, obs[0], breakdown, bool(done[0]), single


# -- trajectory export ------------------------------------------------------

TRAJECTORY_FIELDS = ("t", "q_R", "q_O", "qd_R", "qd_O", "action",
                     "reward", "stage", "delta_R", "alpha")


class TrajectoryWriter:
    """Line-delimited JSON trajectory: one header record, then one record
    per control step with the exact field order of TRAJECTORY_FIELDS."""

    def __init__(self, fh: IO[str], scene: SceneConfig, seed: int,
                 obj_he: tuple[float, float], initial_q: np.ndarray,
                 initial_v: np.ndarray):
        self.fh = fh
        header = {
            "record": "header",
            "scene": scene_to_dict(scene),
            "seed": int(seed),
            "object_half_extents": [float(x) for x in obj_he],
            "q0": [float(x) for x in initial_q],
            "v0": [float(x) for x in initial_v],
        }
        fh.write(json.dumps(header) + "\n")

    def write_step(self, t: float, q: np.ndarray, v: np.ndarray,
                   action: np.ndarray, reward: RewardBreakdown,
                   stage: CurriculumStage, delta_r: float,
                   alpha: float) -> None:
        rec = {
            "record": "step",
            "t": float(t),
            "q_R": [float(x) for x in q[0:4]],
            "q_O": [float(x) for x in q[4:7]],
            "qd_R": [float(x) for x in v[0:4]],
            "qd_O": [float(x) for x in v[4:7]],
            "action": [float(x) for x in action],
            "reward": {k: float(getattr(reward, k)) for k in
                       ("r_f", "r_l", "r_k", "r_p", "r_b", "r_total")},
            "stage": stage.value,
            "delta_R": float(delta_r),
            "alpha": float(alpha),
        }
        self.fh.write(json.dumps(rec) + "\n")


def scene_to_dict(scene: SceneConfig) -> dict:
    d = dataclasses.asdict(scene)
    return d


def scene_from_dict(d: dict) -> SceneConfig:
    d = dict(d)
    rnd = d.pop("randomization", {})
    if isinstance(rnd, Randomization):
        rand = rnd
    else:
        rnd = dict(rnd)
        if "object_x_range" in rnd:
            rnd["object_x_range"] = tuple(rnd["object_x_range"])
        rand = Randomization(**rnd)
    if "object_half_extents" in d:
        d["object_half_extents"] = tuple(d["object_half_extents"])
    return SceneConfig(randomization=rand, **d)


def read_trajectory(fh: IO[str]) -> tuple[dict, list[dict]]:
    """Parse a trajectory file; raises ValueError with the 1-based line
    number on malformed records."""
    header = None
    steps = []
    lineno = 0
    for line in fh:
        lineno += 1
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed record at line {lineno}: {exc}")
        kind = rec.get("record")
        if kind == "header":
            header = rec
        elif kind == "step":
            missing = [f for f in TRAJECTORY_FIELDS if f not in rec]
            if missing:
                raise ValueError(
                    f"malformed record at line {lineno}: missing {missing}")
            steps.append(rec)
        else:
            raise ValueError(f"malformed record at line {lineno}: "
                             f"unknown record kind {kind!r}")
    if header is None and not steps:
        raise ValueError("no records")
    if header is None:
        raise ValueError("no header record")
    return header, steps
