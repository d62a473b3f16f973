"""
Classical detectors used as baselines for the in-context detector.

Single-frame functions follow the column convention of the pilot block
(X is N_t x m, Y is N_r x m). The ``*_batch`` variants operate on frames
stacked row-wise as produced by the channel engine (x is B x T x N_t,
y is B x T x N_r) and are what the evaluation manager runs.
"""

import itertools
from functools import lru_cache
from typing import Optional

import numpy as np
import structlog

from defined.data.models import ChannelEstimate, Constellation, Frame, FrameBatch, PilotBlock
from defined.engines.constellation import (
    joint_symbol_table,
    nearest_indices,
    nearest_joint_symbol,
)
from defined.errors import (
    ComplexityGuardError,
    ShapeMismatchError,
    UnsupportedConstellationError,
)

logger = structlog.get_logger()

# Sequences scored per chunk in batched MLSD
MLSD_CHUNK_ELEMENTS = 4_000_000


def lmmse_estimate(block: PilotBlock) -> ChannelEstimate:
    """
    LMMSE channel estimate Y X^H (X X^H + sigma2 I)^-1

    Args:
        block: Known pilots X (N_t x m) and their observations Y (N_r x m)

    Returns:
        ChannelEstimate; used_pseudo_inverse is set when sigma2 = 0 and
        X X^H is singular
    """
    X = np.atleast_2d(np.asarray(block.X, dtype=complex))
    Y = np.atleast_2d(np.asarray(block.Y, dtype=complex))
    if X.shape[1] != Y.shape[1] or X.shape[1] < 1:
        raise ShapeMismatchError(
            f"pilot block needs matching non-empty columns, got X {X.shape} and Y {Y.shape}"
        )

    n_t = X.shape[0]
    gram = X @ X.conj().T + block.sigma2 * np.eye(n_t)
    cross = X @ Y.conj().T  # (Y X^H)^H

    if block.sigma2 == 0 and np.linalg.matrix_rank(gram) < n_t:
        logger.debug("lmmse_pseudo_inverse", n_t=n_t, pilots=X.shape[1])
        H_hat = (np.linalg.pinv(gram) @ cross).conj().T
        return ChannelEstimate(H_hat=H_hat, used_pseudo_inverse=True)

    H_hat = np.linalg.solve(gram, cross).conj().T
    return ChannelEstimate(H_hat=H_hat)


def lmmse_estimate_batch(x: np.ndarray, y: np.ndarray, sigma2: np.ndarray) -> np.ndarray:
    """
    Row-wise LMMSE estimate for a stack of frames

    Args:
        x: (B, m, N_t) known symbols
        y: (B, m, N_r) observations
        sigma2: (B,) noise variances

    Returns:
        (B, N_r, N_t) channel estimates
    """
    n_t = x.shape[-1]
    sigma2 = np.asarray(sigma2, dtype=float)
    gram = np.einsum("bmi,bmj->bij", x, x.conj()) + sigma2[:, None, None] * np.eye(n_t)
    cross = np.einsum("bmi,bmr->bir", x, y.conj())

    singular = sigma2 == 0
    if np.any(singular):
        singular[singular] = np.linalg.matrix_rank(gram[singular]) < n_t

    H_hat_h = np.empty_like(cross)
    regular = ~singular
    if np.any(regular):
        H_hat_h[regular] = np.linalg.solve(gram[regular], cross[regular])
    if np.any(singular):
        H_hat_h[singular] = np.linalg.pinv(gram[singular]) @ cross[singular]
    return np.conj(np.swapaxes(H_hat_h, 1, 2))


def project_detect(H_hat: np.ndarray, y: np.ndarray, constellation: Constellation, n_t: int) -> int:
    """
    Exhaustive projection detector argmin_x ||H_hat x - y||^2

    Args:
        H_hat: (N_r, N_t) channel estimate
        y: (N_r,) received vector
        constellation: Alphabet on every antenna
        n_t: Transmit antennas

    Returns:
        Joint-symbol index, lowest index on ties
    """
    H_hat = np.atleast_2d(np.asarray(H_hat, dtype=complex))
    y = np.atleast_1d(np.asarray(y, dtype=complex))
    if H_hat.shape != (y.shape[0], n_t):
        raise ShapeMismatchError(f"H_hat {H_hat.shape} does not match y {y.shape} and n_t={n_t}")

    table = joint_symbol_table(constellation, n_t)
    candidates = table @ H_hat.T
    return nearest_joint_symbol(y, list(candidates))


def project_detect_batch(H_hat: np.ndarray, y: np.ndarray, table: np.ndarray) -> np.ndarray:
    """
    Batched projection detector

    Args:
        H_hat: (B, N_r, N_t) estimates
        y: (B, N_r) received vectors
        table: (M, N_t) joint-symbol table

    Returns:
        (B,) joint-symbol indices
    """
    candidates = np.einsum("brt,mt->bmr", H_hat, table)
    return nearest_indices(y, candidates)


def mmse_df_detect(
    frame: Frame,
    constellation: Constellation,
    n_t: int = 1,
    oracle_feedback: bool = False,
) -> np.ndarray:
    """
    Decision-directed MMSE detection of one frame

    Pilots are the first k pairs. Every later decision is appended to the
    pair set as if it were a pilot before the next symbol is detected.

    Returns:
        (T - k,) detected joint-symbol indices for t = k+1..T
    """
    if frame.k < 1:
        raise ValueError("mmse_df_detect needs at least one pilot")

    table = joint_symbol_table(constellation, n_t)
    known = list(frame.x[: frame.k])
    decisions = []
    for t in range(frame.k, frame.T):
        block = PilotBlock(X=np.array(known).T, Y=frame.y[:t].T, sigma2=frame.task.sigma2)
        estimate = lmmse_estimate(block)
        decision = project_detect(estimate.H_hat, frame.y[t], constellation, n_t)
        decisions.append(decision)
        known.append(frame.x[t] if oracle_feedback else table[decision])
    return np.array(decisions, dtype=int)


def mmse_df_detect_batch(batch: FrameBatch, table: np.ndarray, oracle_feedback: bool = False) -> np.ndarray:
    """
    Decision-directed MMSE over a frame batch

    Returns:
        (B, T - k) detected indices for positions k+1..T
    """
    known = batch.x.copy()
    decisions = np.empty((batch.size, batch.T - batch.k), dtype=int)
    for t in range(batch.k, batch.T):
        H_hat = lmmse_estimate_batch(known[:, :t], batch.y[:, :t], batch.sigma2)
        decided = project_detect_batch(H_hat, batch.y[:, t], table)
        decisions[:, t - batch.k] = decided
        if not oracle_feedback:
            known[:, t] = table[decided]
    return decisions


def pilot_only_detect_batch(
    batch: FrameBatch, m: int, table: np.ndarray, positions: Optional[range] = None
) -> np.ndarray:
    """
    Estimate once from the first m clean pairs, then detect later positions

    Args:
        batch: Frames
        m: Number of clean pairs used for the estimate
        table: (M, N_t) joint-symbol table
        positions: 0-based positions to detect, defaults to m..T-1

    Returns:
        (B, len(positions)) detected indices
    """
    positions = positions if positions is not None else range(m, batch.T)
    H_hat = lmmse_estimate_batch(batch.x[:, :m], batch.y[:, :m], batch.sigma2)
    return np.stack(
        [project_detect_batch(H_hat, batch.y[:, t], table) for t in positions], axis=1
    )


@lru_cache(maxsize=32)
def _sequence_grid(size: int, free: int) -> np.ndarray:
    """All index tuples of the given length in lexicographic order"""
    grid = np.array(list(itertools.product(range(size), repeat=free)), dtype=int)
    grid = grid.reshape(size ** free, free)
    grid.setflags(write=False)
    return grid


def _check_mlsd(constellation: Constellation, T: int, max_T: int):
    if not constellation.is_psk:
        raise UnsupportedConstellationError(
            f"MLSD needs a unit-modulus alphabet, {constellation.scheme.value} is not PSK"
        )
    if T > max_T:
        raise ComplexityGuardError(
            f"MLSD over T={T} needs {constellation.size ** (T - 1)} candidates, cap is T={max_T}"
        )
    if T < 1:
        raise ShapeMismatchError("MLSD needs a non-empty sequence")


def _mlsd_objective(correlation: np.ndarray, energy: np.ndarray, sigma2: np.ndarray) -> np.ndarray:
    """|S Y^H|^2 / (sigma2 ||S||^2 + sigma2^2) - ln(||S||^2 + sigma2), noiseless limit for sigma2 = 0"""
    power = np.abs(correlation) ** 2
    sigma2 = np.asarray(sigma2, dtype=float)[..., None] if np.ndim(sigma2) else float(sigma2)
    with np.errstate(divide="ignore", invalid="ignore"):
        full = power / (sigma2 * energy + sigma2 ** 2) - np.log(energy + sigma2)
    return np.where(np.asarray(sigma2) > 0, full, power / energy)


def mlsd_detect(
    Y: np.ndarray,
    sigma2: float,
    constellation: Constellation,
    first_symbol: int,
    max_T: int = 12,
) -> np.ndarray:
    """
    Non-coherent exhaustive maximum-likelihood sequence detection (SISO)

    The first symbol is fixed to first_symbol, which removes the phase
    ambiguity of PSK alphabets. Candidates are scored in lexicographic order
    and the first maximiser wins.

    Args:
        Y: (T,) received sequence
        sigma2: Noise variance
        constellation: PSK alphabet
        first_symbol: Known index of the first transmitted symbol
        max_T: Complexity cap on T

    Returns:
        (T,) detected indices, element 0 equal to first_symbol
    """
    Y = np.asarray(Y, dtype=complex)
    if Y.ndim == 2 and Y.shape[1] == 1:
        Y = Y[:, 0]
    if Y.ndim != 1:
        raise ShapeMismatchError(f"MLSD is single-antenna, got Y with shape {Y.shape}")
    T = Y.shape[0]
    _check_mlsd(constellation, T, max_T)

    points = constellation.points
    grid = _sequence_grid(constellation.size, T - 1)
    correlation = points[first_symbol] * np.conj(Y[0]) + points[grid] @ np.conj(Y[1:])
    energy = np.abs(points[first_symbol]) ** 2 + np.sum(np.abs(points[grid]) ** 2, axis=1)
    scores = _mlsd_objective(correlation, energy, sigma2)

    best = int(np.argmax(scores))
    return np.concatenate([[first_symbol], grid[best]]).astype(int)


def mlsd_detect_batch(
    Y: np.ndarray,
    sigma2: np.ndarray,
    constellation: Constellation,
    first_symbols: np.ndarray,
    max_T: int = 12,
) -> np.ndarray:
    """
    MLSD for a stack of SISO sequences

    Args:
        Y: (B, T) received sequences
        sigma2: (B,) noise variances
        constellation: PSK alphabet
        first_symbols: (B,) known first indices
        max_T: Complexity cap on T

    Returns:
        (B, T) detected indices
    """
    B, T = Y.shape
    _check_mlsd(constellation, T, max_T)

    points = constellation.points
    grid = _sequence_grid(constellation.size, T - 1)
    grid_points = points[grid]
    grid_energy = np.sum(np.abs(grid_points) ** 2, axis=1)
    chunk = max(1, MLSD_CHUNK_ELEMENTS // grid.shape[0])

    detections = np.empty((B, T), dtype=int)
    detections[:, 0] = first_symbols
    for start in range(0, B, chunk):
        rows = slice(start, min(start + chunk, B))
        first_points = points[first_symbols[rows]]
        correlation = (first_points * np.conj(Y[rows, 0]))[:, None] + np.conj(Y[rows, 1:]) @ grid_points.T
        energy = np.abs(first_points)[:, None] ** 2 + grid_energy[None, :]
        scores = _mlsd_objective(correlation, energy, sigma2[rows])
        detections[rows, 1:] = grid[np.argmax(scores, axis=1)]
    return detections
