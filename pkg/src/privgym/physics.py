"""Planar rigid-body simulation of a floating gripper, a box object, and
static scenery (table, floor, optional walls).

Dynamics are deterministic: the same state, forces, and world produce
bit-identical results. Contacts are inelastic (no restitution) with
Coulomb friction and support a per-pair signed-distance relaxation offset
on robot-table pairs, which moves the effective contact surface without
touching any other pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels as K


class SolverConvergenceError(RuntimeError):
    """Contact solve failed to reach tolerance within max iterations."""

    def __init__(self, residual: float):
        super().__init__(f"contact solver did not converge, worst residual "
                         f"{residual:.3e}")
        self.residual = residual


@dataclass(frozen=True)
class Material:
    friction_coeff: float = 0.5
    restitution: float = 0.0

    def __post_init__(self):
        if self.friction_coeff < 0.0:
            raise ValueError("friction_coeff must be >= 0")
        if not 0.0 <= self.restitution <= 1.0:
            raise ValueError("restitution must be in [0, 1]")


@dataclass(frozen=True)
class BodyDef:
    """A box body. Static bodies ignore mass/inertia."""

    id: str
    mass: float
    inertia: float
    half_extents: tuple[float, float]
    is_static: bool = False
    material: Material = field(default_factory=Material)

    def __post_init__(self):
        if not self.is_static and (self.mass <= 0.0 or self.inertia <= 0.0):
            raise ValueError(f"body {self.id}: dynamic body needs positive "
                             "mass and inertia")
        if min(self.half_extents) <= 0.0:
            raise ValueError(f"body {self.id}: half_extents must be positive")


@dataclass(frozen=True)
class SystemState:
    """Stacked generalized positions/velocities of the gripper and object.

    q_r: (palm x, palm z, palm angle, aperture)
    q_o: (x, z, angle)
    """

    q_r: tuple[float, float, float, float]
    q_o: tuple[float, float, float]
    qd_r: tuple[float, float, float, float]
    qd_o: tuple[float, float, float]
    t: float = 0.0

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        q = np.array([*self.q_r, *self.q_o], dtype=np.float64)
        v = np.array([*self.qd_r, *self.qd_o], dtype=np.float64)
        return q, v

    @staticmethod
    def from_arrays(q: np.ndarray, v: np.ndarray, t: float) -> "SystemState":
        return SystemState(q_r=tuple(q[:4]), q_o=tuple(q[4:7]),
                           qd_r=tuple(v[:4]), qd_o=tuple(v[4:7]), t=t)

    def is_finite(self) -> bool:
        q, v = self.as_arrays()
        return bool(np.isfinite(q).all() and np.isfinite(v).all()
                    and math.isfinite(self.t))


@dataclass(frozen=True)
class ContactPoint:
    """One candidate contact, solved or not."""

    pair: tuple[str, str]
    point: tuple[float, float]
    normal: tuple[float, float]
    phi: float
    relax_offset: float = 0.0
    normal_impulse: float = 0.0
    tangent_impulse: float = 0.0


@dataclass(frozen=True)
class GeneralizedForce:
    """Applied generalized force: robot wrench + aperture force, object wrench."""

    on_robot: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    on_object: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([*self.on_robot, *self.on_object], dtype=np.float64)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.as_array()).all())


_BODY_NAMES = {
    K.B_TABLE: "table", K.B_FLOOR: "floor", K.B_OBJECT: "object",
    K.B_PALM: "palm", K.B_FINGER_L: "finger_left",
    K.B_FINGER_R: "finger_right", K.B_WALL_L: "wall_left",
    K.B_WALL_R: "wall_right",
}


@dataclass(frozen=True)
class World:
    """World definition: body roster plus gripper drive parameters.

    The gripper is palm + two fingers rigidly driven by 4 generalized
    coordinates; its generalized mass matrix is constant diagonal
    (robot_mass, robot_mass, robot_inertia, aperture_mass).
    """

    table_half_width: float = 0.5
    table_height: float = 0.4
    object_half_extents: tuple[float, float] = (0.05, 0.03)
    object_mass: float = 0.2
    palm_half_extents: tuple[float, float] = (0.06, 0.015)
    finger_half_extents: tuple[float, float] = (0.008, 0.035)
    robot_mass: float = 0.5
    robot_inertia: float = 0.002
    aperture_mass: float = 0.025
    aperture_max: float = 0.08
    friction_coeff: float = 0.5
    gravity: float = 9.81
    walls_enabled: bool = False
    wall_half_extents: tuple[float, float] = (0.01, 0.02)
    gravity_comp_robot: bool = True
    robot_lin_damping: float = 0.0
    robot_ang_damping: float = 0.0
    aperture_damping: float = 0.0
    object_lin_damping: float = 0.0
    object_ang_damping: float = 0.0
    grip_servo_gain: float = 3.0
    grip_force_max: float = 10.0
    contact_margin: float = 0.005
    baumgarte_beta: float = 0.2
    contact_slop: float = 0.005
    # gripping closes an 8-contact loop (object boxed by table, palm, and
    # both fingers) where Gauss-Seidel needs a few hundred sweeps for the
    # 1e-6 residual; easy solves exit early, so the high cap is cheap
    solver_max_iters: int = 512
    solver_residual_tol: float = 1e-6
    # degenerate separating contacts stall above the target residual with
    # negligible physical error; accept a stall below stall_tol, treat
    # anything above fail_tol as a genuine solver failure
    solver_stall_tol: float = 1e-4
    solver_fail_tol: float = 1e-3
    floor_half_width: float = 2.0
    workspace_x: tuple[float, float] = (-math.inf, math.inf)
    workspace_z: tuple[float, float] = (-math.inf, math.inf)

    def bodies(self) -> list[BodyDef]:
        mat = Material(friction_coeff=self.friction_coeff)
        hw, hh = self.table_half_width, self.table_height / 2.0
        out = [
            BodyDef("table", 1.0, 1.0, (hw, hh), is_static=True, material=mat),
            BodyDef("floor", 1.0, 1.0, (self.floor_half_width, 0.05),
                    is_static=True, material=mat),
            BodyDef("object", self.object_mass,
                    self.object_mass * (self.object_half_extents[0] ** 2 +
                                        self.object_half_extents[1] ** 2) / 3.0,
                    self.object_half_extents, material=mat),
            BodyDef("palm", self.robot_mass, self.robot_inertia,
                    self.palm_half_extents, material=mat),
            BodyDef("finger_left", 2.0 * self.aperture_mass, 1e-5,
                    self.finger_half_extents, material=mat),
            BodyDef("finger_right", 2.0 * self.aperture_mass, 1e-5,
                    self.finger_half_extents, material=mat),
        ]
        if self.walls_enabled:
            out.append(BodyDef("wall_left", 1.0, 1.0, self.wall_half_extents,
                               is_static=True, material=mat))
            out.append(BodyDef("wall_right", 1.0, 1.0, self.wall_half_extents,
                               is_static=True, material=mat))
        return out

    def params(self) -> np.ndarray:
        p = np.zeros(K.N_PARAMS, dtype=np.float64)
        p[K.P_TABLE_HW] = self.table_half_width
        p[K.P_TABLE_TOP] = self.table_height
        p[K.P_FLOOR_HW] = self.floor_half_width
        p[K.P_OBJ_MASS] = self.object_mass
        p[K.P_PALM_HX] = self.palm_half_extents[0]
        p[K.P_PALM_HZ] = self.palm_half_extents[1]
        p[K.P_FIN_HX] = self.finger_half_extents[0]
        p[K.P_FIN_HZ] = self.finger_half_extents[1]
        p[K.P_ROBOT_MASS] = self.robot_mass
        p[K.P_ROBOT_INERTIA] = self.robot_inertia
        p[K.P_AP_MASS] = self.aperture_mass
        p[K.P_AP_MAX] = self.aperture_max
        p[K.P_MU] = self.friction_coeff
        p[K.P_GRAVITY] = self.gravity
        p[K.P_BETA] = self.baumgarte_beta
        p[K.P_SLOP] = self.contact_slop
        p[K.P_MARGIN] = self.contact_margin
        p[K.P_MAX_ITERS] = self.solver_max_iters
        p[K.P_RESIDUAL_TOL] = self.solver_residual_tol
        p[K.P_WALLS] = 1.0 if self.walls_enabled else 0.0
        p[K.P_WALL_HX] = self.wall_half_extents[0]
        p[K.P_WALL_HZ] = self.wall_half_extents[1]
        p[K.P_GRAVITY_COMP] = 1.0 if self.gravity_comp_robot else 0.0
        p[K.P_DAMP_R_LIN] = self.robot_lin_damping
        p[K.P_DAMP_R_ANG] = self.robot_ang_damping
        p[K.P_DAMP_AP] = self.aperture_damping
        p[K.P_DAMP_O_LIN] = self.object_lin_damping
        p[K.P_DAMP_O_ANG] = self.object_ang_damping
        p[K.P_GRIP_KV] = self.grip_servo_gain
        p[K.P_GRIP_FMAX] = self.grip_force_max
        p[K.P_STALL_TOL] = self.solver_stall_tol
        p[K.P_FAIL_TOL] = self.solver_fail_tol
        p[K.P_WS_XMIN] = self.workspace_x[0]
        p[K.P_WS_XMAX] = self.workspace_x[1]
        p[K.P_WS_ZMIN] = self.workspace_z[0]
        p[K.P_WS_ZMAX] = self.workspace_z[1]
        return p

    def with_object_half_extents(self, he: tuple[float, float]) -> "World":
        return replace(self, object_half_extents=he)


DEFAULT_DT = 1.0 / 120.0


def _rows_to_contacts(rows: np.ndarray, n: int) -> list[ContactPoint]:
    out = []
    for c in range(n):
        out.append(ContactPoint(
            pair=(_BODY_NAMES[int(rows[c, K.C_A])],
                  _BODY_NAMES[int(rows[c, K.C_B])]),
            point=(rows[c, K.C_PX], rows[c, K.C_PZ]),
            normal=(rows[c, K.C_NX], rows[c, K.C_NZ]),
            phi=rows[c, K.C_PHI],
            relax_offset=rows[c, K.C_RELAX],
            normal_impulse=rows[c, K.C_JN],
            tangent_impulse=rows[c, K.C_JT],
        ))
    return out


_NAME_TO_ID = {v: k for k, v in _BODY_NAMES.items()}


def _contacts_to_rows(contacts: list[ContactPoint]) -> np.ndarray:
    rows = np.zeros((max(len(contacts), 1), K.NCOLS), dtype=np.float64)
    for c, cp in enumerate(contacts):
        rows[c, K.C_A] = _NAME_TO_ID[cp.pair[0]]
        rows[c, K.C_B] = _NAME_TO_ID[cp.pair[1]]
        rows[c, K.C_PX], rows[c, K.C_PZ] = cp.point
        rows[c, K.C_NX], rows[c, K.C_NZ] = cp.normal
        rows[c, K.C_PHI] = cp.phi
        rows[c, K.C_RELAX] = cp.relax_offset
        rows[c, K.C_JN] = cp.normal_impulse
        rows[c, K.C_JT] = cp.tangent_impulse
    return rows


def detect_contacts(state: SystemState, world: World,
                    relax_offset_robot_table: float = 0.0,
                    margin: float | None = None) -> list[ContactPoint]:
    """Contact candidates for every body pair with phi + offset <= margin.

    Robot-table pairs use ``relax_offset_robot_table``; every other pair
    uses offset 0. Impulse fields are zero (unsolved).
    """
    if relax_offset_robot_table < 0.0:
        raise ValueError("relax offset must be >= 0")
    if not state.is_finite():
        raise ValueError("invalid state")
    if margin is None:
        margin = world.contact_margin
    q, _ = state.as_arrays()
    rows = np.empty((K.MAX_CONTACTS, K.NCOLS), dtype=np.float64)
    he = np.asarray(world.object_half_extents, dtype=np.float64)
    n = K.detect_contacts_kernel(q, he, world.params(),
                                 relax_offset_robot_table, margin, rows)
    return _rows_to_contacts(rows, n)


def solve_contacts(contacts: list[ContactPoint], state: SystemState,
                   world: World, dt: float = DEFAULT_DT,
                   ) -> tuple[list[ContactPoint], SystemState]:
    """Solve contact impulses; returns solved contacts and the
    impulse-updated state (velocities only; positions untouched).

    Raises SolverConvergenceError when the residual tolerance is not met
    within the iteration budget.
    """
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    q, v = state.as_arrays()
    rows = _contacts_to_rows(contacts)
    he = np.asarray(world.object_half_extents, dtype=np.float64)
    residual, converged = K.solve_contacts_kernel(
        rows, len(contacts), q, v, he, world.params(), dt)
    if not converged:
        raise SolverConvergenceError(residual)
    return (_rows_to_contacts(rows, len(contacts)),
            SystemState.from_arrays(q, v, state.t))


def step(state: SystemState, applied: GeneralizedForce, world: World,
         relax_offset_robot_table: float = 0.0, dt: float = DEFAULT_DT,
         ) -> SystemState:
    """Advance one substep with semi-implicit Euler.

    Velocities pick up applied forces, gravity, and contact impulses,
    then positions integrate with the new velocities; the aperture is
    clamped to [0, aperture_max]. Deterministic: identical inputs give
    bit-identical outputs.
    """
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    if not state.is_finite():
        raise ValueError("invalid state")
    if not applied.is_finite():
        raise ValueError("invalid state")
    if relax_offset_robot_table < 0.0:
        raise ValueError("relax offset must be >= 0")
    q, v = state.as_arrays()
    he = np.asarray(world.object_half_extents, dtype=np.float64)
    rows = np.empty((K.MAX_CONTACTS, K.NCOLS), dtype=np.float64)
    _, residual, converged = K.substep_kernel(
        q, v, he, world.params(), applied.as_array(),
        relax_offset_robot_table, dt, rows)
    if not converged:
        raise SolverConvergenceError(residual)
    return SystemState.from_arrays(q, v, state.t + dt)


def kinetic_energy(state: SystemState, world: World) -> float:
    """Total kinetic energy: 0.5 * sum(m |v|^2 + I w^2) over all DOFs."""
    vrx, vrz, wr, va = state.qd_r
    vox, voz, wo = state.qd_o
    i_o = world.object_mass * (world.object_half_extents[0] ** 2 +
                               world.object_half_extents[1] ** 2) / 3.0
    return 0.5 * (world.robot_mass * (vrx * vrx + vrz * vrz)
                  + world.robot_inertia * wr * wr
                  + world.aperture_mass * va * va
                  + world.object_mass * (vox * vox + voz * voz)
                  + i_o * wo * wo)


def body_pose(body: str, state: SystemState, world: World,
              ) -> tuple[float, float, float, float, float]:
    """World-frame (cx, cz, angle, hx, hz) of a named body."""
    q, _ = state.as_arrays()
    he = np.asarray(world.object_half_extents, dtype=np.float64)
    return K.body_pose(_NAME_TO_ID[body], q, he, world.params())


def finger_tip_z(state: SystemState, world: World) -> float:
    """Lowest corner height over both fingers (gripper reach extent)."""
    lo = math.inf
    q, _ = state.as_arrays()
    he = np.asarray(world.object_half_extents, dtype=np.float64)
    for bid in (K.B_FINGER_L, K.B_FINGER_R):
        cx, cz, ang, hx, hz = K.body_pose(bid, q, he, world.params())
        c, s = math.cos(ang), math.sin(ang)
        for sx in (-1.0, 1.0):
            for sz in (-1.0, 1.0):
                z = cz + s * sx * hx + c * sz * hz
                lo = min(lo, z)
    return lo
