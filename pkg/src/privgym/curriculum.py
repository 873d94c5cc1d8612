"""Three-stage privileged-action curriculum scheduler.

Stage 1 (Relaxation) lowers the robot-table contact surface by delta_r
and raises it in 0.1 m notches; stage 2 (VirtualForce) shrinks the gate
factor alpha by x0.9 clamps; stage 3 (Normal) runs plain physics. Each
advancement requires a full rolling window of episode outcomes with a
success rate above the threshold, and clears the window.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import NamedTuple


class CurriculumStage(enum.Enum):
    RELAXATION = "Relaxation"
    VIRTUAL_FORCE = "VirtualForce"
    NORMAL = "Normal"


DELTA_R_INIT = 0.3
DELTA_R_STEP = 0.1
ALPHA_INIT = 0.85
ALPHA_DECAY = 0.9
ALPHA_MIN = 0.06
SUCCESS_THRESHOLD = 0.70
WINDOW_SIZE = 200


@dataclass(frozen=True)
class CurriculumState:
    """Immutable scheduler state; operations return updated copies."""

    stage: CurriculumStage = CurriculumStage.RELAXATION
    delta_r: float = DELTA_R_INIT
    alpha: float = ALPHA_INIT
    window: int = WINDOW_SIZE
    success_threshold: float = SUCCESS_THRESHOLD
    delta_r_step: float = DELTA_R_STEP
    alpha_decay: float = ALPHA_DECAY
    alpha_min: float = ALPHA_MIN
    outcomes: tuple[bool, ...] = field(default=())
    episodes_seen: int = 0

    def success_rate(self) -> float:
        if not self.outcomes:
            return 0.0
        return sum(self.outcomes) / len(self.outcomes)

    def window_full(self) -> bool:
        return len(self.outcomes) >= self.window


def record_episode(cs: CurriculumState, success: bool) -> CurriculumState:
    """Append one episode outcome, evicting past the window size."""
    outcomes = cs.outcomes + (bool(success),)
    if len(outcomes) > cs.window:
        outcomes = outcomes[len(outcomes) - cs.window:]
    return replace(cs, outcomes=outcomes, episodes_seen=cs.episodes_seen + 1)


def maybe_advance(cs: CurriculumState) -> CurriculumState:
    """Advance the schedule one notch when the full window clears the bar.

    Relaxation: delta_r -= 0.1 (floored at 0; hitting 0 moves to
    VirtualForce). VirtualForce: alpha <- clamp(alpha*0.9, alpha_min,
    alpha_init) (hitting the floor moves to Normal). Normal: no-op.
    Every advancement clears the outcome window.
    """
    if not cs.window_full() or cs.success_rate() <= cs.success_threshold:
        return cs
    if cs.stage == CurriculumStage.RELAXATION:
        # schedule notches are decimal values; keep them exact
        new_delta = max(0.0, round(cs.delta_r - cs.delta_r_step, 10))
        stage = (CurriculumStage.VIRTUAL_FORCE if new_delta <= 0.0
                 else CurriculumStage.RELAXATION)
        return replace(cs, delta_r=new_delta, stage=stage, outcomes=())
    if cs.stage == CurriculumStage.VIRTUAL_FORCE:
        new_alpha = min(max(cs.alpha * cs.alpha_decay, cs.alpha_min),
                        ALPHA_INIT)
        stage = (CurriculumStage.NORMAL if new_alpha <= cs.alpha_min
                 else CurriculumStage.VIRTUAL_FORCE)
        return replace(cs, alpha=new_alpha, stage=stage, outcomes=())
    return replace(cs, outcomes=())


class Privileges(NamedTuple):
    relax_offset: float
    gate_alpha: float
    stage: CurriculumStage


def privileges(cs: CurriculumState) -> Privileges:
    """Privilege bundle the environments should run under right now."""
    if cs.stage == CurriculumStage.RELAXATION:
        return Privileges(cs.delta_r, cs.alpha, cs.stage)
    return Privileges(0.0, cs.alpha, cs.stage)
