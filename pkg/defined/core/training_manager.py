import copy
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import structlog
import torch

from defined.config.logging_config import log_call
from defined.config.run_configs import TrainConfig
from defined.core.curriculum_engine import CurriculumEngine, PlateauDetector
from defined.data.models import DfPrompts, FrameBatch, SnrRange, TracePoint, TrainPhase
from defined.data.repositories.checkpoint_repository import CheckpointRepository
from defined.engines.channel_engine import TRAIN_STREAM, ChannelEngine, frame_rng
from defined.engines.tokenizer import tokenize_frames
from defined.engines.transformer import (
    DecisionFeedbackTransformer,
    batch_loss,
    decode_with_feedback,
)
from defined.errors import ConfigurationError, NumericalInstabilityError, TrainingDivergedError

logger = structlog.get_logger()

# Sub-streams of the training stream
ICL_FRAMES = 0
CLEAN_FRAMES = 1
DF_FRAMES = 2
DF_PILOT_DRAWS = 3


def _as_tensors(model: DecisionFeedbackTransformer, tokens: np.ndarray, targets: np.ndarray, mask: np.ndarray):
    return (
        torch.as_tensor(tokens, dtype=model.P.dtype),
        torch.as_tensor(targets, dtype=torch.long),
        torch.as_tensor(mask, dtype=torch.bool),
    )


def icl_loss(model: DecisionFeedbackTransformer, batch: FrameBatch) -> torch.Tensor:
    """Mean cross-entropy over every y-position of clean prompts"""
    tokens = tokenize_frames(batch.y, batch.x_indices, model.config.D_s)
    mask = np.ones_like(batch.x_indices, dtype=bool)
    return batch_loss(model, *_as_tensors(model, tokens, batch.x_indices, mask))


def generate_df_prompts(frozen: DecisionFeedbackTransformer, batch: FrameBatch, k: int) -> DfPrompts:
    """
    Build decision-feedback prompts with a frozen model

    The first k x-tokens are true pilots; x-tokens k+1..T-1 carry the frozen
    model's argmax decisions, produced by T-k-1 sequential forward passes
    batched across frames. Targets stay the true symbols.
    """
    labels, _ = decode_with_feedback(frozen, batch.y, batch.x_indices, k, detect_last=False)
    mask = np.zeros_like(batch.x_indices, dtype=bool)
    mask[:, k:] = True
    return DfPrompts(
        tokens=tokenize_frames(batch.y, labels, frozen.config.D_s),
        labels=labels,
        targets=np.array(batch.x_indices, copy=True),
        mask=mask,
        k=k,
    )


def df_loss(model: DecisionFeedbackTransformer, prompts: DfPrompts, k: int) -> torch.Tensor:
    """Mean cross-entropy over positions k+1..T of decision-feedback prompts"""
    expected = np.zeros_like(prompts.mask)
    expected[:, k:] = True
    if prompts.k != k or not np.array_equal(prompts.mask, expected):
        raise ValueError(f"prompts were built for k={prompts.k}, loss requested for k={k}")
    return batch_loss(model, *_as_tensors(model, prompts.tokens, prompts.targets, prompts.mask))


def combine_losses(df: torch.Tensor, icl: torch.Tensor, alpha: float) -> torch.Tensor:
    return alpha * df + (1.0 - alpha) * icl


def finetune_loss(
    model: DecisionFeedbackTransformer,
    clean_batch: FrameBatch,
    prompts: DfPrompts,
    alpha: float,
) -> torch.Tensor:
    """alpha * df_loss + (1 - alpha) * icl_loss"""
    return combine_losses(df_loss(model, prompts, prompts.k), icl_loss(model, clean_batch), alpha)


@dataclass
class TrainingResult:
    model: DecisionFeedbackTransformer
    trace: List[TracePoint]
    switch_step: Optional[int] = None
    checkpoints: List[str] = field(default_factory=list)


class TrainingManager:
    """Runs ICL pre-training and decision-feedback fine-tuning"""

    def __init__(
        self,
        config: TrainConfig,
        checkpoint_repository: Optional[CheckpointRepository] = None,
    ):
        self.config = config
        self.checkpoint_repo = checkpoint_repository or CheckpointRepository()
        self.engine = ChannelEngine(
            scheme=config.model.scheme,
            snr=SnrRange(config.snr_lo_db, config.snr_hi_db),
            seed=config.seed,
            n_t=config.model.n_t,
            n_r=config.model.n_r,
            fading=config.fading,
            kappa=config.kappa,
        )
        self.curriculum = CurriculumEngine(config.curriculum, config.T, config.epoch_steps)

    def build_model(self) -> DecisionFeedbackTransformer:
        """Fresh detector initialised from the configured seed"""
        torch.manual_seed(self.config.seed)
        model = DecisionFeedbackTransformer(self.config.model)
        model.reset_parameters(torch.Generator().manual_seed(self.config.seed))
        return model

    def frames(self, sub_stream: int, step: int, T: int, k: int) -> FrameBatch:
        return self.engine.batch((TRAIN_STREAM, sub_stream, step), range(self.config.batch_size), T, k)

    @log_call("train")
    def train(
        self,
        initial_model: Optional[DecisionFeedbackTransformer] = None,
        checkpoint_path: Optional[Union[str, Path]] = None,
    ) -> TrainingResult:
        """
        Run the configured training phases

        Pre-training runs for phase=pretrain, or for phase=finetune when no
        initial model is given; fine-tuning runs for phase=finetune.

        Args:
            initial_model: Detector to continue from, or None for a fresh one
            checkpoint_path: Final checkpoint path; stage checkpoints are
                written next to it

        Returns:
            TrainingResult with the trained model and its loss trace
        """
        config = self.config
        model = initial_model if initial_model is not None else self.build_model()
        if model.config != config.model:
            raise ConfigurationError("initial model shape differs from the training config")

        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        warmup = config.warmup_steps
        scheduler = torch.optim.lr_scheduler.LambdaLR(
            optimizer, lambda s: min(1.0, (s + 1) / warmup) if warmup > 0 else 1.0
        )
        result = TrainingResult(model=model, trace=[])

        logger.info(
            "training_started",
            phase=config.phase.value,
            scheme=config.model.scheme.value,
            parameters=model.parameter_count,
            batch_size=config.batch_size,
            fresh_model=initial_model is None,
        )

        step = 0
        if config.phase == TrainPhase.ICL_PRETRAIN or initial_model is None:
            step = self._pretrain(model, optimizer, scheduler, result, checkpoint_path)

        if config.phase == TrainPhase.DF_FINETUNE:
            result.switch_step = step
            self._save_stage(model, TrainPhase.ICL_PRETRAIN, checkpoint_path, step, result)
            self._finetune(model, optimizer, scheduler, result, step)

        if checkpoint_path is not None:
            saved = self.checkpoint_repo.save(
                model, config.phase, checkpoint_path, meta={"steps": len(result.trace), "seed": config.seed}
            )
            result.checkpoints.append(str(saved))

        logger.info(
            "training_completed",
            steps=len(result.trace),
            final_loss=result.trace[-1].loss if result.trace else None,
            switch_step=result.switch_step,
        )
        return result

    def _pretrain(self, model, optimizer, scheduler, result: TrainingResult, checkpoint_path) -> int:
        config = self.config
        plateau = PlateauDetector(config.plateau_tolerance, config.model.n_classes)
        epoch_losses = []

        for step in range(config.pretrain_steps):
            if self.curriculum.is_stage_boundary(step):
                self._save_stage(model, TrainPhase.ICL_PRETRAIN, checkpoint_path, step, result)

            T_step = self.curriculum.context_length(step)
            batch = self.frames(ICL_FRAMES, step, T_step, 1)
            loss = self._optimise(model, optimizer, scheduler, lambda: icl_loss(model, batch), step, result)
            self._record(result, step, TrainPhase.ICL_PRETRAIN, loss, context_length=T_step)

            epoch_losses.append(loss)
            if (step + 1) % config.epoch_steps == 0:
                epoch_loss = float(np.mean(epoch_losses))
                epoch_losses = []
                if plateau.update(epoch_loss, self.curriculum.at_final_length(step)):
                    return step + 1
        return config.pretrain_steps

    def _finetune(self, model, optimizer, scheduler, result: TrainingResult, offset: int):
        config = self.config
        snapshot = copy.deepcopy(model)
        snapshot.requires_grad_(False)
        pilot_rng = frame_rng(config.seed, TRAIN_STREAM, DF_PILOT_DRAWS)

        for i in range(config.finetune_steps):
            step = offset + i
            if i % config.df_refresh_interval == 0:
                snapshot.load_state_dict(model.state_dict())

            k = int(pilot_rng.choice(config.k_df_choices))
            clean = self.frames(CLEAN_FRAMES, step, config.T, 1)
            df_frames = self.frames(DF_FRAMES, step, config.T, k)
            loss = self._optimise(
                model,
                optimizer,
                scheduler,
                lambda: finetune_loss(model, clean, generate_df_prompts(snapshot, df_frames, k), config.alpha),
                step,
                result,
            )
            self._record(result, step, TrainPhase.DF_FINETUNE, loss, k_df=k)

    def _optimise(self, model, optimizer, scheduler, compute_loss, step: int, result: TrainingResult) -> float:
        optimizer.zero_grad()
        try:
            loss = compute_loss()
        except NumericalInstabilityError as e:
            logger.error("training_diverged", step=step, layer=e.layer)
            raise TrainingDivergedError(step, result.trace) from e

        value = float(loss.detach())
        if not math.isfinite(value):
            logger.error("training_diverged", step=step, loss=value)
            raise TrainingDivergedError(step, result.trace)

        loss.backward()
        optimizer.step()
        scheduler.step()
        return value

    def _record(self, result: TrainingResult, step: int, phase: TrainPhase, loss: float, **context):
        result.trace.append(TracePoint(step=step, phase=phase.value, loss=loss))
        if step % self.config.log_every == 0:
            logger.info("training_step", step=step, phase=phase.value, loss=round(loss, 5), **context)

    def _save_stage(self, model, phase: TrainPhase, checkpoint_path, step: int, result: TrainingResult):
        if checkpoint_path is None:
            return
        path = Path(checkpoint_path)
        stage_path = path.with_name(f"{path.stem}.step{step}{path.suffix}")
        saved = self.checkpoint_repo.save(model, phase, stage_path, meta={"step": step, "seed": self.config.seed})
        result.checkpoints.append(str(saved))
