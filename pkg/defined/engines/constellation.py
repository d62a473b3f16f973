"""
Modulation alphabets and joint multi-antenna symbol indexing.

Square QAM points are labelled row-major over (I level, Q level), both in
ascending order; SER is label agnostic so any fixed bijection works. BPSK is
ordered (+1, -1). A joint symbol index is mixed radix in the constellation
size with antenna 0 as the least significant digit, and each antenna carries
1/sqrt(N_t) of the amplitude so the total transmit power is one.
"""

from functools import lru_cache
from typing import Sequence, Union

import numpy as np
import structlog

from defined.data.models import Constellation, JointSymbol, Modulation
from defined.errors import ShapeMismatchError, SymbolRangeError

logger = structlog.get_logger()

_QAM_SIDES = {Modulation.QPSK: 2, Modulation.QAM16: 4, Modulation.QAM64: 8}


def build_constellation(scheme: Union[Modulation, str]) -> Constellation:
    """
    Build the unit-average-energy alphabet for a modulation scheme

    Args:
        scheme: Modulation enum or its string value ("bpsk", "16qam", ...)

    Returns:
        Constellation with normalised points
    """
    scheme = Modulation(scheme)
    return _build(scheme)


@lru_cache(maxsize=None)
def _build(scheme: Modulation) -> Constellation:
    if scheme == Modulation.BPSK:
        grid = np.array([1.0 + 0.0j, -1.0 + 0.0j])
    else:
        side = _QAM_SIDES[scheme]
        levels = np.arange(-(side - 1), side, 2, dtype=float)
        i_levels, q_levels = np.meshgrid(levels, levels, indexing="ij")
        grid = (i_levels + 1j * q_levels).ravel()

    scale = float(np.sqrt(np.mean(np.abs(grid) ** 2)))
    points = grid / scale
    points.setflags(write=False)
    return Constellation(scheme=scheme, points=points, scale=scale)


def joint_symbol(constellation: Constellation, index: int, n_t: int) -> JointSymbol:
    """
    Decode a joint-symbol index into per-antenna transmit values

    Args:
        constellation: Alphabet used on every antenna
        index: Joint index in [0, C^n_t)
        n_t: Number of transmit antennas

    Returns:
        JointSymbol with per-antenna values scaled by 1/sqrt(n_t)
    """
    size = constellation.size
    if not 0 <= index < size ** n_t:
        raise SymbolRangeError(f"joint index {index} outside [0, {size ** n_t})")

    digits = []
    remainder = int(index)
    for _ in range(n_t):
        digits.append(remainder % size)
        remainder //= size

    per_antenna = constellation.points[digits] / np.sqrt(n_t)
    return JointSymbol(index=int(index), per_antenna=per_antenna)


def joint_symbol_index(constellation: Constellation, per_antenna: Sequence[complex]) -> int:
    """Re-encode per-antenna values (as produced by joint_symbol) into their joint index"""
    values = np.asarray(per_antenna, dtype=complex) * np.sqrt(len(per_antenna))
    index = 0
    for antenna, value in enumerate(values):
        digit = int(np.argmin(np.abs(constellation.points - value)))
        index += digit * constellation.size ** antenna
    return index


def joint_symbol_table(constellation: Constellation, n_t: int) -> np.ndarray:
    """All C^n_t joint symbols as rows of an (C^n_t, n_t) complex array"""
    return _joint_table(constellation.scheme, n_t)


@lru_cache(maxsize=None)
def _joint_table(scheme: Modulation, n_t: int) -> np.ndarray:
    constellation = _build(scheme)
    count = constellation.size ** n_t
    table = np.stack(
        [joint_symbol(constellation, i, n_t).per_antenna for i in range(count)]
    )
    table.setflags(write=False)
    return table


def nearest_joint_symbol(y_eff: np.ndarray, candidates: Sequence[np.ndarray]) -> int:
    """
    Index of the candidate closest to y_eff in squared Euclidean distance

    Ties resolve to the lowest index.

    Args:
        y_eff: Complex vector
        candidates: Non-empty list of complex vectors of the same dimension

    Returns:
        Index into candidates
    """
    y_eff = np.atleast_1d(np.asarray(y_eff, dtype=complex))
    candidate_array = np.asarray(candidates, dtype=complex)
    if candidate_array.ndim == 1:
        candidate_array = candidate_array[:, None]
    if candidate_array.shape[0] == 0:
        raise ShapeMismatchError("candidate list is empty")
    if candidate_array.shape[1:] != y_eff.shape:
        raise ShapeMismatchError(
            f"candidates have shape {candidate_array.shape[1:]}, y_eff has {y_eff.shape}"
        )

    distances = np.sum(np.abs(candidate_array - y_eff) ** 2, axis=1)
    return int(np.argmin(distances))


def nearest_indices(y_eff: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """
    Batched nearest-candidate search

    Args:
        y_eff: (B, d) complex received vectors
        candidates: (B, M, d) per-row candidate sets, or (M, d) shared by all rows

    Returns:
        (B,) integer indices, ties to the lowest index
    """
    if candidates.ndim == 2:
        candidates = candidates[None, :, :]
    if candidates.shape[-1] != y_eff.shape[-1]:
        raise ShapeMismatchError(
            f"candidate dimension {candidates.shape[-1]} != received dimension {y_eff.shape[-1]}"
        )
    distances = np.sum(np.abs(candidates - y_eff[:, None, :]) ** 2, axis=-1)
    return np.argmin(distances, axis=-1)


def neighbor_mask(constellation: Constellation, n_t: int) -> np.ndarray:
    """
    Boolean (M, M) matrix, True where joint symbol j is a nearest neighbour of i

    Used to measure how often wrong decisions land next to the true symbol.
    Nearest neighbours differ on exactly one antenna, so the (M, M) distance
    matrix is never formed.
    """
    points = constellation.points
    size = constellation.size
    per_antenna = np.abs(points[:, None] - points[None, :]) ** 2 / n_t
    np.fill_diagonal(per_antenna, np.inf)

    index = np.arange(size ** n_t)
    digits = [(index // size ** a) % size for a in range(n_t)]
    closest = np.min([per_antenna[d].min(axis=1) for d in digits], axis=0)

    mask = np.zeros((size ** n_t, size ** n_t), dtype=bool)
    for a, d in enumerate(digits):
        rows, symbols = np.nonzero(np.isclose(per_antenna[d], closest[:, None]))
        mask[rows, rows + (symbols - d[rows]) * size ** a] = True
    return mask
