from typing import List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from defined.data.models import EvalMethod, Fading, Modulation, TrainPhase

CONSTELLATION_SIZES = {
    Modulation.BPSK: 2,
    Modulation.QPSK: 4,
    Modulation.QAM16: 16,
    Modulation.QAM64: 64,
}

PSK_SCHEMES = (Modulation.BPSK, Modulation.QPSK)

T_MAX = 31


class ModelConfig(BaseModel):
    """Shape of the decoder-only detector"""

    scheme: Modulation = Modulation.QAM16
    n_t: int = Field(default=1, ge=1)
    n_r: int = Field(default=1, ge=1)
    d_e: int = Field(default=64, ge=1)
    n_layers: int = Field(default=8, ge=1)
    n_heads: int = Field(default=8, ge=1)
    d_ff: int = Field(default=256, ge=1)
    T_max: int = Field(default=T_MAX, ge=1)
    layer_norm_eps: float = 1e-5
    init_std: float = 0.02

    @model_validator(mode="after")
    def check_heads(self) -> "ModelConfig":
        if self.d_e % self.n_heads != 0:
            raise ValueError(f"d_e={self.d_e} is not divisible by n_heads={self.n_heads}")
        return self

    @property
    def n_classes(self) -> int:
        return CONSTELLATION_SIZES[self.scheme] ** self.n_t

    @property
    def D_s(self) -> int:
        return max(2 * self.n_r, self.n_classes)

    @property
    def max_tokens(self) -> int:
        return 2 * self.T_max

    @property
    def d_k(self) -> int:
        return self.d_e // self.n_heads


class CurriculumConfig(BaseModel):
    """Context-length schedule for ICL pre-training"""

    enabled: bool = True
    T_start: int = Field(default=11, ge=2)
    T_step: int = Field(default=5, ge=1)
    epochs_per_stage: int = Field(default=2, ge=1)


class TrainConfig(BaseModel):
    phase: TrainPhase = TrainPhase.DF_FINETUNE
    model: ModelConfig = ModelConfig()
    alpha: float = Field(default=0.7, ge=0.0, le=1.0)
    batch_size: int = Field(default=512, ge=1)
    T: int = Field(default=T_MAX, ge=2)
    k_df_choices: Tuple[int, ...] = (1, 2, 3, 4)
    pretrain_steps: int = Field(default=20000, ge=0)
    finetune_steps: int = Field(default=10000, ge=0)
    epoch_steps: int = Field(default=1000, ge=1)
    learning_rate: float = Field(default=3e-4, gt=0.0)
    warmup_steps: int = Field(default=500, ge=0)
    curriculum: CurriculumConfig = CurriculumConfig()
    plateau_tolerance: float = Field(default=0.01, ge=0.0)
    df_refresh_interval: int = Field(default=1, ge=1)
    fading: Fading = Fading.RAYLEIGH
    kappa: float = Field(default=4.0, ge=0.0)
    snr_lo_db: float = 10.0
    snr_hi_db: float = 20.0
    seed: int = 0
    log_every: int = Field(default=100, ge=1)

    @model_validator(mode="after")
    def check_lengths(self) -> "TrainConfig":
        if self.snr_lo_db > self.snr_hi_db:
            raise ValueError("snr_lo_db must not exceed snr_hi_db")
        if self.T > self.model.T_max:
            raise ValueError(f"T={self.T} exceeds the model's T_max={self.model.T_max}")
        if self.curriculum.T_start > self.T:
            raise ValueError(f"curriculum T_start={self.curriculum.T_start} exceeds T={self.T}")
        if not self.k_df_choices:
            raise ValueError("k_df_choices must not be empty")
        if min(self.k_df_choices) < 1 or max(self.k_df_choices) >= self.T:
            raise ValueError(f"every DF pilot count must satisfy 1 <= k < T={self.T}")
        return self


class EvalConfig(BaseModel):
    method: EvalMethod
    scheme: Modulation
    n_t: int = Field(default=1, ge=1)
    n_r: int = Field(default=1, ge=1)
    snr_db: float = 20.0
    k: int = Field(default=1, ge=1)
    T: int = Field(default=T_MAX, ge=2)
    n_prompts: int = Field(default=8000, ge=1)
    checkpoint: Optional[str] = None
    seed: int = 0
    fading: Fading = Fading.RAYLEIGH
    kappa: float = Field(default=4.0, ge=0.0)
    oracle_feedback: bool = False
    mlsd_max_T: Optional[int] = Field(default=None, ge=2)

    @model_validator(mode="after")
    def check_method(self) -> "EvalConfig":
        if not (1 <= self.k < self.T <= T_MAX):
            raise ValueError(f"need 1 <= k < T <= {T_MAX}, got k={self.k}, T={self.T}")
        if self.method == EvalMethod.MLSD:
            if self.n_t != 1 or self.n_r != 1:
                raise ValueError("mlsd is SISO only")
            if self.scheme not in PSK_SCHEMES:
                raise ValueError(f"mlsd needs a PSK constellation, got {self.scheme.value}")
        if self.method.uses_model and not self.checkpoint:
            raise ValueError(f"method {self.method.value} needs a checkpoint")
        if self.oracle_feedback and not self.method.uses_feedback:
            raise ValueError("oracle feedback only applies to decision-feedback methods")
        return self


class TheoryConfig(BaseModel):
    d: int = Field(default=2, ge=1)
    sigma2: float = Field(default=0.25, gt=0.0)
    xi2: Optional[float] = Field(default=None, gt=0.0)
    k_grid: List[int] = [10, 100, 1000, 10000]
    trials: int = Field(default=100000, ge=1000)
    seed: int = 0
    query: Optional[List[float]] = None

    @field_validator("k_grid")
    @classmethod
    def check_grid(cls, value: List[int]) -> List[int]:
        if not value or min(value) < 1:
            raise ValueError("k_grid needs positive entries")
        return sorted(value)
