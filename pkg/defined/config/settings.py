from typing import Dict, Tuple

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Workbench settings, read from DEFINED_* environment variables and .env"""

    model_config = SettingsConfigDict(
        env_prefix="DEFINED_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # Parallelism
    threads: int = 4

    # Logging
    log_level: str = "INFO"
    log_file: str = "defined.log"

    # Outputs
    output_dir: str = "./runs"

    # Evaluation
    eval_batch_size: int = 2000
    mlsd_max_T_bpsk: int = Field(default=12, ge=2)
    mlsd_max_T_qpsk: int = Field(default=8, ge=2)

    # Training SNR ranges (dB) per modulation, centred on the usual test SNR
    snr_ranges_db: Dict[str, Tuple[float, float]] = {
        "bpsk": (10.0, 20.0),
        "qpsk": (15.0, 25.0),
        "16qam": (25.0, 35.0),
        "64qam": (30.0, 40.0),
    }

    def mlsd_cap(self, scheme: str) -> int:
        """Longest sequence the exhaustive MLSD search accepts for a scheme"""
        return self.mlsd_max_T_bpsk if scheme == "bpsk" else self.mlsd_max_T_qpsk
