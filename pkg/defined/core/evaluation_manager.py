import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import structlog
import torch

from defined.config.logging_config import log_call
from defined.config.run_configs import EvalConfig
from defined.config.settings import Settings
from defined.data.models import CurvePoint, EvalCurve, EvalMethod, FrameBatch, SnrRange, TrainPhase
from defined.data.repositories.checkpoint_repository import CheckpointRepository
from defined.engines.baseline_detectors import (
    mlsd_detect_batch,
    mmse_df_detect_batch,
    pilot_only_detect_batch,
)
from defined.engines.channel_engine import EVAL_STREAM, MLSD_STREAM, ChannelEngine
from defined.engines.constellation import joint_symbol_table, neighbor_mask
from defined.engines.tokenizer import tokenize_frames
from defined.engines.transformer import DecisionFeedbackTransformer, decode_with_feedback
from defined.errors import ConfigurationError

logger = structlog.get_logger()

# Training phase each model-based method expects its checkpoint to come from
EXPECTED_PHASE = {
    EvalMethod.ICL_ICL: TrainPhase.ICL_PRETRAIN,
    EvalMethod.ICL_DF: TrainPhase.ICL_PRETRAIN,
    EvalMethod.DEFINED_DF: TrainPhase.DF_FINETUNE,
    EvalMethod.DEFINED_ICL: TrainPhase.DF_FINETUNE,
}


def gain_df(curve: EvalCurve, k: int, last: Optional[int] = None) -> Optional[float]:
    """
    Percentage SER reduction from context length k to the last length

    Returns None when SER at length k is zero. Negative values mean the
    feedback made things worse.
    """
    last = last if last is not None else max(curve.lengths())
    try:
        ser_k = curve.ser_at(k)
        ser_last = curve.ser_at(last)
    except KeyError as e:
        raise ValueError(f"curve lacks the lengths needed for gain_df: {e}") from e
    if ser_k == 0:
        return None
    return (ser_k - ser_last) / ser_k * 100.0


def binomial_stderr(ser: float, n: int) -> float:
    return math.sqrt(ser * (1.0 - ser) / n)


@dataclass
class ErrorTally:
    """Error counts per curve length plus error-locality counts"""

    lengths: List[int]
    errors: np.ndarray
    trials: np.ndarray
    wrong: int = 0
    wrong_neighbor: int = 0

    @classmethod
    def for_lengths(cls, lengths: List[int]) -> "ErrorTally":
        return cls(lengths=list(lengths), errors=np.zeros(len(lengths), dtype=np.int64),
                   trials=np.zeros(len(lengths), dtype=np.int64))

    def add(self, detected: np.ndarray, truth: np.ndarray, neighbors: np.ndarray, column: Optional[int] = None):
        """Accumulate a (B, n_lengths) block, or a (B, m) block for one column"""
        wrong = detected != truth
        if column is None:
            self.errors += wrong.sum(axis=0)
            self.trials += wrong.shape[0]
        else:
            self.errors[column] += wrong.sum()
            self.trials[column] += wrong.size
        self.wrong += int(wrong.sum())
        self.wrong_neighbor += int(neighbors[truth[wrong], detected[wrong]].sum())

    def points(self) -> List[CurvePoint]:
        points = []
        for length, errors, trials in zip(self.lengths, self.errors, self.trials):
            ser = float(errors) / float(trials)
            points.append(CurvePoint(length=length, ser=ser, stderr=binomial_stderr(ser, int(trials))))
        return points

    @property
    def neighbor_fraction(self) -> Optional[float]:
        return self.wrong_neighbor / self.wrong if self.wrong else None


class EvaluationManager:
    """SER evaluation of the baselines and the in-context detectors"""

    def __init__(self, settings: Settings, checkpoint_repository: Optional[CheckpointRepository] = None):
        self.settings = settings
        self.checkpoint_repo = checkpoint_repository or CheckpointRepository()

    def _engine(self, config: EvalConfig) -> ChannelEngine:
        return ChannelEngine(
            scheme=config.scheme,
            snr=SnrRange(config.snr_db, config.snr_db),
            seed=config.seed,
            n_t=config.n_t,
            n_r=config.n_r,
            fading=config.fading,
            kappa=config.kappa,
        )

    def _batches(self, engine: ChannelEngine, stream: tuple, n: int, T: int, k: int):
        size = self.settings.eval_batch_size
        for start in range(0, n, size):
            yield engine.batch(stream, range(start, min(start + size, n)), T, k)

    def load_model(self, config: EvalConfig) -> DecisionFeedbackTransformer:
        """Load the checkpoint for a model-based method and check it fits the setting"""

        loaded = self.checkpoint_repo.load(config.checkpoint)
        model_config = loaded.model.config
        if (model_config.scheme, model_config.n_t, model_config.n_r) != (config.scheme, config.n_t, config.n_r):
            raise ConfigurationError(
                f"checkpoint is for {model_config.scheme.value} {model_config.n_t}x{model_config.n_r}, "
                f"evaluation asks for {config.scheme.value} {config.n_t}x{config.n_r}"
            )
        if config.T > model_config.T_max:
            raise ConfigurationError(f"T={config.T} exceeds the checkpoint's T_max={model_config.T_max}")

        expected = EXPECTED_PHASE[config.method]
        if loaded.phase != expected:
            logger.warning(
                "checkpoint_phase_mismatch",
                method=config.method.value,
                checkpoint_phase=loaded.phase.value,
                expected_phase=expected.value,
            )
        loaded.model.eval()
        return loaded.model

    @log_call("run_eval")
    def run_eval(self, config: EvalConfig, model: Optional[DecisionFeedbackTransformer] = None) -> EvalCurve:
        """
        Evaluate one detector on n_prompts frames at a fixed SNR

        Decision-feedback methods report lengths k..T-1, where the point at
        length l is the SER of detecting x_{l+1} after l context pairs.
        No-feedback methods report pilot counts 1..T-1 with clean pairs.

        Args:
            config: Evaluation setting
            model: Already loaded detector; loaded from config.checkpoint when None

        Returns:
            EvalCurve with SER, binomial stderr and gain_df for feedback methods
        """
        method = config.method
        if method == EvalMethod.MLSD:
            return self.run_mlsd_eval(config)
        if method.uses_model and model is None:
            model = self.load_model(config)

        engine = self._engine(config)
        table = joint_symbol_table(engine.constellation, config.n_t)
        neighbors = neighbor_mask(engine.constellation, config.n_t)
        lengths = list(range(config.k, config.T)) if method.uses_feedback else list(range(1, config.T))
        tally = ErrorTally.for_lengths(lengths)
        reference = ErrorTally.for_lengths([config.k]) if method == EvalMethod.MMSE_PK else None

        logger.info(
            "evaluation_started",
            method=method.value,
            scheme=config.scheme.value,
            snr_db=config.snr_db,
            k=config.k,
            T=config.T,
            n_prompts=config.n_prompts,
        )

        for batch in self._batches(engine, (EVAL_STREAM,), config.n_prompts, config.T, config.k):
            truth = batch.x_indices[:, lengths]
            if method == EvalMethod.MMSE_PK:
                for column, m in enumerate(lengths):
                    detected = pilot_only_detect_batch(batch, m, table, positions=range(m, m + 1))
                    tally.add(detected, batch.x_indices[:, m : m + 1], neighbors, column=column)
                detected = pilot_only_detect_batch(batch, config.k, table)
                reference.add(detected, batch.x_indices[:, config.k :], neighbors, column=0)
            elif method == EvalMethod.MMSE_DF:
                tally.add(mmse_df_detect_batch(batch, table, config.oracle_feedback), truth, neighbors)
            elif method.uses_feedback:
                _, detected = decode_with_feedback(
                    model, batch.y, batch.x_indices, config.k, oracle_feedback=config.oracle_feedback
                )
                tally.add(detected, truth, neighbors)
            else:
                tally.add(self._clean_prompt_decisions(model, batch)[:, lengths], truth, neighbors)

        curve = EvalCurve(
            method=method.value,
            modulation=config.scheme.value,
            snr_db=config.snr_db,
            k=config.k,
            points=tally.points(),
            neighbor_error_fraction=tally.neighbor_fraction,
            metadata=self._metadata(config),
        )
        if method.uses_feedback:
            curve.gain_df = gain_df(curve, config.k)
        if reference is not None:
            curve.reference_ser = reference.points()[0].ser

        logger.info(
            "evaluation_completed",
            method=method.value,
            first_ser=curve.points[0].ser,
            last_ser=curve.points[-1].ser,
            gain_df=curve.gain_df,
            reference_ser=curve.reference_ser,
        )
        return curve

    @staticmethod
    def _clean_prompt_decisions(model: DecisionFeedbackTransformer, batch: FrameBatch) -> np.ndarray:
        """Argmax at every y-position of the clean prompt, shape (B, T)"""
        tokens = torch.as_tensor(
            tokenize_frames(batch.y, batch.x_indices, model.config.D_s), dtype=model.P.dtype
        )
        with torch.no_grad():
            return model(tokens).logits.argmax(dim=-1).numpy()

    @log_call("run_mlsd_eval")
    def run_mlsd_eval(self, config: EvalConfig) -> EvalCurve:
        """
        Exhaustive MLSD SER for frame lengths 2..T, plotted at length T-1

        The first symbol of each frame is known. Lengths above the complexity
        cap are left out of the curve and logged.
        """
        cap = config.mlsd_max_T or self.settings.mlsd_cap(config.scheme.value)
        engine = self._engine(config)
        neighbors = neighbor_mask(engine.constellation, 1)
        feasible = [T for T in range(2, config.T + 1) if T <= cap]
        skipped = [T for T in range(2, config.T + 1) if T > cap]
        if skipped:
            logger.warning("mlsd_lengths_skipped", cap=cap, first_skipped=skipped[0], last_skipped=skipped[-1])

        tally = ErrorTally.for_lengths([T - 1 for T in feasible])
        for column, T in enumerate(feasible):
            for batch in self._batches(engine, (MLSD_STREAM, T), config.n_prompts, T, 1):
                detected = mlsd_detect_batch(
                    batch.y[:, :, 0], batch.sigma2, engine.constellation, batch.x_indices[:, 0], max_T=cap
                )
                tally.add(detected[:, 1:], batch.x_indices[:, 1:], neighbors, column=column)
            logger.debug("mlsd_length_done", T=T, errors=int(tally.errors[column]))

        metadata = self._metadata(config)
        metadata.update({"mlsd_cap": cap, "skipped_T": skipped})
        return EvalCurve(
            method=config.method.value,
            modulation=config.scheme.value,
            snr_db=config.snr_db,
            k=1,
            points=tally.points(),
            neighbor_error_fraction=tally.neighbor_fraction,
            metadata=metadata,
        )

    @staticmethod
    def _metadata(config: EvalConfig) -> dict:
        return {
            "n_t": config.n_t,
            "n_r": config.n_r,
            "T": config.T,
            "n_prompts": config.n_prompts,
            "seed": config.seed,
            "fading": config.fading.value,
            "kappa": config.kappa,
            "oracle_feedback": config.oracle_feedback,
            "checkpoint": config.checkpoint,
        }
