from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel

# Enumerations


class Modulation(str, Enum):
    BPSK = "bpsk"
    QPSK = "qpsk"
    QAM16 = "16qam"
    QAM64 = "64qam"


class Fading(str, Enum):
    RAYLEIGH = "rayleigh"
    RICIAN = "rician"


class TrainPhase(str, Enum):
    ICL_PRETRAIN = "pretrain"
    DF_FINETUNE = "finetune"


class EvalMethod(str, Enum):
    MMSE_PK = "mmse"
    MMSE_DF = "mmse-df"
    MLSD = "mlsd"
    ICL_ICL = "icl"
    ICL_DF = "icl-df"
    DEFINED_DF = "defined"
    DEFINED_ICL = "defined-icl"

    @property
    def uses_feedback(self) -> bool:
        return self in (EvalMethod.MMSE_DF, EvalMethod.ICL_DF, EvalMethod.DEFINED_DF)

    @property
    def uses_model(self) -> bool:
        return self in (
            EvalMethod.ICL_ICL,
            EvalMethod.ICL_DF,
            EvalMethod.DEFINED_DF,
            EvalMethod.DEFINED_ICL,
        )


# Signal models


@dataclass(frozen=True)
class Constellation:
    scheme: Modulation
    points: np.ndarray  # complex, unit average energy
    scale: float  # divisor applied to the integer grid

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def is_psk(self) -> bool:
        return bool(np.allclose(np.abs(self.points), 1.0))


@dataclass(frozen=True)
class JointSymbol:
    index: int
    per_antenna: np.ndarray  # N_t complex values, each scaled by 1/sqrt(N_t)


@dataclass(frozen=True)
class SnrRange:
    lo_db: float
    hi_db: float

    def __post_init__(self):
        if self.lo_db > self.hi_db:
            raise ValueError(f"SNR range inverted: {self.lo_db} > {self.hi_db}")


@dataclass(frozen=True)
class ChannelTask:
    H: np.ndarray  # N_r x N_t complex
    sigma2: float
    fading: Fading
    kappa: Optional[float] = None  # Rician factor, None for Rayleigh

    @property
    def snr_db(self) -> float:
        return float(-10.0 * np.log10(self.sigma2)) if self.sigma2 > 0 else float("inf")


@dataclass(frozen=True)
class Frame:
    task: ChannelTask
    T: int
    k: int
    x_indices: np.ndarray  # length T joint-symbol indices
    x: np.ndarray  # T x N_t transmitted vectors
    y: np.ndarray  # T x N_r received vectors
    stream_key: Tuple[int, ...] = ()  # seed and spawn key that regenerate the frame


@dataclass(frozen=True)
class FrameBatch:
    """Frames of one shape stacked along axis 0 for vectorised detectors"""

    H: np.ndarray  # B x N_r x N_t
    sigma2: np.ndarray  # B
    x_indices: np.ndarray  # B x T
    x: np.ndarray  # B x T x N_t
    y: np.ndarray  # B x T x N_r
    k: int

    @property
    def size(self) -> int:
        return self.x_indices.shape[0]

    @property
    def T(self) -> int:
        return self.x_indices.shape[1]


@dataclass(frozen=True)
class PilotBlock:
    X: np.ndarray  # N_t x m
    Y: np.ndarray  # N_r x m
    sigma2: float


@dataclass(frozen=True)
class ChannelEstimate:
    H_hat: np.ndarray
    used_pseudo_inverse: bool = False


# Transformer inputs


@dataclass
class TokenSequence:
    tokens: np.ndarray  # n_tokens x D_s
    y_positions: List[int]

    @property
    def length(self) -> int:
        return self.tokens.shape[0]


@dataclass
class DfPrompts:
    """Decision-feedback prompts for a frame batch, with true-label targets"""

    tokens: np.ndarray  # B x (2T-1) x D_s
    labels: np.ndarray  # B x T labels placed in the x-tokens (pilots, then decisions)
    targets: np.ndarray  # B x T true joint-symbol indices
    mask: np.ndarray  # B x T, True at supervised y-positions k+1..T
    k: int


# Evaluation


@dataclass
class CurvePoint:
    length: int
    ser: float
    stderr: float


@dataclass
class EvalCurve:
    method: str
    modulation: str
    snr_db: float
    k: int
    points: List[CurvePoint]
    gain_df: Optional[float] = None
    reference_ser: Optional[float] = None
    neighbor_error_fraction: Optional[float] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def ser_at(self, length: int) -> float:
        for point in self.points:
            if point.length == length:
                return point.ser
        raise KeyError(f"curve has no point at length {length}")

    def lengths(self) -> List[int]:
        return [p.length for p in self.points]


# Training


@dataclass
class TracePoint:
    step: int
    phase: str
    loss: float


# Theory lab


@dataclass(frozen=True)
class BinaryGaussianTask:
    mu0: np.ndarray
    mu1: np.ndarray
    Lambda: np.ndarray

    @property
    def dim(self) -> int:
        return self.mu0.shape[0]


@dataclass(frozen=True)
class LinearTfWeight:
    W: np.ndarray


@dataclass
class MonteCarloEstimate:
    mean: float
    stderr: float
    n_trials: int


# Run bookkeeping


class RunManifest(BaseModel):
    subcommand: str
    config: Dict[str, Any]
    seed: Optional[int] = None
    code_version: str
    argv: List[str]
    started_at: datetime
    finished_at: Optional[datetime] = None
    outputs: List[str] = []
    results: Dict[str, Any] = {}
