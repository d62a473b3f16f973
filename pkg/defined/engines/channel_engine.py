from typing import Iterable, Tuple, Union

import numpy as np
import structlog

from defined.data.models import (
    ChannelTask,
    Constellation,
    Fading,
    Frame,
    FrameBatch,
    Modulation,
    SnrRange,
)
from defined.engines.constellation import build_constellation, joint_symbol_table

logger = structlog.get_logger()

# Stream identifiers keep training, evaluation and MLSD frames disjoint
TRAIN_STREAM = 0
EVAL_STREAM = 1
MLSD_STREAM = 2


def frame_rng(seed: int, *key: int) -> np.random.Generator:
    """Counter-based Philox stream for one frame, addressed by (seed, key...)"""
    sequence = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(sequence))


def snr_db_to_sigma2(snr_db: float) -> float:
    return float(10.0 ** (-snr_db / 10.0))


def complex_gaussian(rng: np.random.Generator, shape: Tuple[int, ...], variance: float = 1.0) -> np.ndarray:
    """Circularly-symmetric complex Gaussian samples, variance split over I and Q"""
    std = np.sqrt(variance / 2.0)
    return std * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def sample_task(
    fading: Union[Fading, str],
    snr: SnrRange,
    rng: np.random.Generator,
    n_r: int = 1,
    n_t: int = 1,
    kappa: float = 4.0,
) -> ChannelTask:
    """
    Draw one detection task: a block-fading channel matrix and a noise level

    Args:
        fading: Rayleigh or Rician
        snr: SNR range in dB, sampled uniformly in dB
        rng: Random stream
        n_r: Receive antennas
        n_t: Transmit antennas
        kappa: Rician factor (ignored for Rayleigh); inf gives pure line of sight

    Returns:
        ChannelTask with unit mean-square channel entries

    Raises:
        ValueError: Rician fading without a non-negative kappa
    """
    fading = Fading(fading)
    snr_db = rng.uniform(snr.lo_db, snr.hi_db)
    sigma2 = snr_db_to_sigma2(snr_db)

    scattered = complex_gaussian(rng, (n_r, n_t))
    if fading == Fading.RAYLEIGH:
        return ChannelTask(H=scattered, sigma2=sigma2, fading=fading)

    if kappa is None or not kappa >= 0.0:
        raise ValueError(f"rician fading needs kappa >= 0, got {kappa}")
    theta = rng.uniform(0.0, 2.0 * np.pi, size=(n_r, n_t))
    line_of_sight = np.exp(1j * theta)
    if np.isinf(kappa):
        H = line_of_sight
    else:
        H = np.sqrt(kappa / (kappa + 1.0)) * line_of_sight + np.sqrt(1.0 / (kappa + 1.0)) * scattered
    return ChannelTask(H=H, sigma2=sigma2, fading=fading, kappa=kappa)


def generate_frame(
    task: ChannelTask,
    T: int,
    k: int,
    rng: np.random.Generator,
    constellation: Constellation,
    n_t: int = 1,
    stream_key: Tuple[int, ...] = (),
) -> Frame:
    """
    Transmit T uniformly drawn joint symbols over the task's channel

    Args:
        task: Channel and noise level, constant over the frame
        T: Frame length
        k: Number of leading pilot symbols
        rng: Random stream
        constellation: Alphabet on every antenna
        n_t: Transmit antennas
        stream_key: Seed and spawn key recorded for regeneration

    Returns:
        Frame with y_t = H x_t + z_t
    """
    if not 1 <= k < T:
        raise ValueError(f"need 1 <= k < T, got k={k}, T={T}")

    table = joint_symbol_table(constellation, n_t)
    x_indices = rng.integers(0, table.shape[0], size=T)
    x = table[x_indices]
    n_r = task.H.shape[0]
    noise = complex_gaussian(rng, (T, n_r), task.sigma2)
    y = x @ task.H.T + noise
    return Frame(task=task, T=T, k=k, x_indices=x_indices, x=x, y=y, stream_key=stream_key)


class ChannelEngine:
    """Reproducible frame factory for one (modulation, antenna, fading, SNR) setting"""

    def __init__(
        self,
        scheme: Union[Modulation, str],
        snr: SnrRange,
        seed: int = 0,
        n_t: int = 1,
        n_r: int = 1,
        fading: Union[Fading, str] = Fading.RAYLEIGH,
        kappa: float = 4.0,
    ):
        self.constellation = build_constellation(scheme)
        self.snr = snr
        self.seed = seed
        self.n_t = n_t
        self.n_r = n_r
        self.fading = Fading(fading)
        self.kappa = kappa

    def frame(self, key: Tuple[int, ...], T: int, k: int) -> Frame:
        """Regenerate the frame addressed by key"""
        rng = frame_rng(self.seed, *key)
        task = sample_task(self.fading, self.snr, rng, self.n_r, self.n_t, self.kappa)
        return generate_frame(
            task, T, k, rng, self.constellation, self.n_t, stream_key=(self.seed, *key)
        )

    def batch(self, stream: Iterable[int], indices: Iterable[int], T: int, k: int) -> FrameBatch:
        """
        Stack frames (stream..., index) for every index into one FrameBatch

        Each frame has its own stream, so a frame is identical whichever batch
        it is generated in.
        """
        prefix = tuple(stream)
        frames = [self.frame((*prefix, int(i)), T, k) for i in indices]
        return stack_frames(frames)


def stack_frames(frames) -> FrameBatch:
    """Stack equally shaped frames along a new batch axis"""
    if not frames:
        raise ValueError("cannot stack an empty frame list")
    return FrameBatch(
        H=np.stack([f.task.H for f in frames]),
        sigma2=np.array([f.task.sigma2 for f in frames]),
        x_indices=np.stack([f.x_indices for f in frames]),
        x=np.stack([f.x for f in frames]),
        y=np.stack([f.y for f in frames]),
        k=frames[0].k,
    )
