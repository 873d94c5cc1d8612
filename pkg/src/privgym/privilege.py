"""Privileged simulation actions: the virtual-table relaxation offset and
the proximity/velocity-gated virtual force channel on the object.

Both are pure functions of the state and the curriculum; nothing here
holds state, so calls are safe from any number of parallel environments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .curriculum import CurriculumStage, CurriculumState
from .physics import SystemState

ALPHA_MIN = 0.06
ALPHA_INIT = 0.85
DELTA_R_INIT = 0.3
F_VIRTUAL_MAX = 5.0


@dataclass(frozen=True)
class GateParams:
    """Thresholds of the virtual-force gate, scaled by the curriculum factor."""

    delta_p: float = 10.0
    delta_v: float = 5.0
    alpha: float = ALPHA_INIT

    def __post_init__(self):
        if self.delta_p <= 0.0 or self.delta_v <= 0.0:
            raise ValueError("gate thresholds must be positive")
        if not ALPHA_MIN <= self.alpha <= ALPHA_INIT:
            raise ValueError(f"alpha must be in [{ALPHA_MIN}, {ALPHA_INIT}]")


@dataclass(frozen=True)
class VirtualForceCommand:
    """Planar force command on the object, bounded per component."""

    f_xy: tuple[float, float]

    def __post_init__(self):
        if max(abs(self.f_xy[0]), abs(self.f_xy[1])) > F_VIRTUAL_MAX + 1e-12:
            raise ValueError("virtual force exceeds the magnitude bound")


def gate_open(state: SystemState, params: GateParams) -> bool:
    """True iff the object is close to the palm center in both planar
    position and planar velocity, strictly within delta_p*alpha and
    delta_v*alpha. Angles are excluded from both norms.
    """
    dx = state.q_o[0] - state.q_r[0]
    dz = state.q_o[1] - state.q_r[1]
    dvx = state.qd_o[0] - state.qd_r[0]
    dvz = state.qd_o[1] - state.qd_r[1]
    return (math.hypot(dx, dz) < params.delta_p * params.alpha
            and math.hypot(dvx, dvz) < params.delta_v * params.alpha)


def effective_object_force(state: SystemState, cmd: VirtualForceCommand,
                           params: GateParams, stage: CurriculumStage,
                           f_max: float = F_VIRTUAL_MAX,
                           ) -> tuple[float, float, float]:
    """Object wrench actually applied for a commanded virtual force.

    Passes (fx, fz, 0) only in the VirtualForce stage with the gate open;
    in every other stage the channel is hard-zeroed, so the policy's
    direct forces on the object are nullified.
    """
    if stage != CurriculumStage.VIRTUAL_FORCE:
        return (0.0, 0.0, 0.0)
    if not gate_open(state, params):
        return (0.0, 0.0, 0.0)
    fx = min(max(cmd.f_xy[0], -f_max), f_max)
    fz = min(max(cmd.f_xy[1], -f_max), f_max)
    return (fx, fz, 0.0)


def virtual_table_offset(curriculum: CurriculumState) -> float:
    """Current robot-table relaxation offset; zero outside stage 1."""
    if curriculum.stage != CurriculumStage.RELAXATION:
        return 0.0
    return curriculum.delta_r
