import math
from typing import List, Optional

import structlog

from defined.config.run_configs import CurriculumConfig

logger = structlog.get_logger()


class CurriculumEngine:
    """
    Context-length schedule for ICL pre-training

    Rules:
    - Training starts with T_start pairs per frame
    - Every epochs_per_stage epochs the length grows by T_step
    - The length never exceeds the final frame length
    """

    def __init__(self, curriculum: CurriculumConfig, T_final: int, epoch_steps: int):
        self.curriculum = curriculum
        self.T_final = T_final
        self.epoch_steps = epoch_steps

    def stage(self, step: int) -> int:
        """Curriculum stage index for a training step"""
        if not self.curriculum.enabled:
            return 0
        epoch = step // self.epoch_steps
        return epoch // self.curriculum.epochs_per_stage

    def context_length(self, step: int) -> int:
        if not self.curriculum.enabled:
            return self.T_final
        length = self.curriculum.T_start + self.stage(step) * self.curriculum.T_step
        return min(length, self.T_final)

    def is_stage_boundary(self, step: int) -> bool:
        """True on the first step of a new context length"""
        if step <= 0:
            return False
        changed = self.context_length(step) != self.context_length(step - 1)
        if changed:
            logger.info(
                "curriculum_stage_changed",
                step=step,
                stage=self.stage(step),
                context_length=self.context_length(step),
            )
        return changed

    def at_final_length(self, step: int) -> bool:
        return self.context_length(step) == self.T_final

    def schedule(self, total_steps: int) -> List[int]:
        """Context length per epoch over a step budget"""
        epochs = math.ceil(total_steps / self.epoch_steps) if total_steps else 0
        return [self.context_length(e * self.epoch_steps) for e in range(epochs)]


class PlateauDetector:
    """
    Decides when ICL pre-training has converged

    An epoch counts as a plateau when its mean loss improved by less than
    the tolerance relative to the previous epoch. Epochs still in the initial
    lull (loss near the uniform-guess level) or not yet at the final context
    length never count.
    A zero tolerance disables the switch, so pre-training runs its full
    step budget.
    """

    # Loss must be below this fraction of ln(n_classes) before a plateau is accepted
    LULL_FRACTION = 0.9

    def __init__(self, tolerance: float, n_classes: int):
        self.tolerance = tolerance
        self.lull_level = self.LULL_FRACTION * math.log(n_classes)
        self.previous: Optional[float] = None
        self.history: List[float] = []

    def update(self, epoch_loss: float, at_final_length: bool = True) -> bool:
        """
        Record one epoch's mean loss

        Args:
            epoch_loss: Mean training loss over the epoch
            at_final_length: Whether the epoch ran at the final context length

        Returns:
            True if training has reached a plateau
        """
        self.history.append(epoch_loss)
        if self.tolerance == 0.0:
            return False
        if not at_final_length:
            self.previous = None
            return False
        previous, self.previous = self.previous, epoch_loss
        if previous is None or epoch_loss > self.lull_level:
            return False

        improvement = (previous - epoch_loss) / previous if previous > 0 else 0.0
        plateau = improvement < self.tolerance
        if plateau:
            logger.info(
                "icl_plateau_reached",
                epoch=len(self.history),
                loss=epoch_loss,
                improvement=improvement,
            )
        return plateau
