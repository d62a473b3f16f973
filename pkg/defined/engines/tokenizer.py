from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from defined.config.run_configs import ModelConfig
from defined.data.models import TokenSequence
from defined.errors import SequenceLengthError, ShapeMismatchError

logger = structlog.get_logger()

Label = Union[int, np.integer, Sequence[float], np.ndarray]


def y_tokens(y: np.ndarray, D_s: int) -> np.ndarray:
    """[Re(y); Im(y)] zero-padded to D_s along the last axis"""
    y = np.asarray(y, dtype=complex)
    n_r = y.shape[-1]
    if 2 * n_r > D_s:
        raise ShapeMismatchError(f"received dimension 2*{n_r} exceeds token width {D_s}")
    tokens = np.zeros(y.shape[:-1] + (D_s,))
    tokens[..., :n_r] = y.real
    tokens[..., n_r : 2 * n_r] = y.imag
    return tokens


def x_tokens(indices: np.ndarray, D_s: int) -> np.ndarray:
    """One-hot labels zero-padded to D_s along a new last axis"""
    indices = np.asarray(indices, dtype=int)
    tokens = np.zeros(indices.shape + (D_s,))
    np.put_along_axis(tokens, indices[..., None], 1.0, axis=-1)
    return tokens


def interleave(y_tok: np.ndarray, x_tok: np.ndarray) -> np.ndarray:
    """
    Build y_1, x_1, ..., y_T from (B, T, D) y-tokens and (B, T-1 or T, D) x-tokens

    The sequence always ends at the last y-token, so any x-token for the last
    position is dropped.
    """
    B, T, D = y_tok.shape
    sequence = np.zeros((B, 2 * T - 1, D))
    sequence[:, 0::2] = y_tok
    sequence[:, 1::2] = x_tok[:, : T - 1]
    return sequence


def y_positions(T: int) -> List[int]:
    return list(range(0, 2 * T - 1, 2))


def _label_index(label: Label, n_classes: int) -> int:
    if np.ndim(label) == 0:
        index = int(label)
    else:
        probabilities = np.asarray(label, dtype=float)
        if probabilities.shape != (n_classes,):
            raise ShapeMismatchError(f"label vector has shape {probabilities.shape}, expected ({n_classes},)")
        index = int(np.argmax(probabilities))
    if not 0 <= index < n_classes:
        raise ShapeMismatchError(f"label {index} outside [0, {n_classes})")
    return index


def tokenize(
    pairs: Sequence[Tuple[np.ndarray, Label]],
    query: Optional[np.ndarray],
    config: ModelConfig,
) -> TokenSequence:
    """
    Turn in-context pairs and an optional query into a token sequence

    Labels may be indices or probability vectors; both become hard one-hot
    x-tokens.

    Args:
        pairs: (y, label) pairs in transmission order
        query: Received vector to detect, or None
        config: Model shape (D_s, n_classes, T_max)

    Returns:
        TokenSequence alternating y- and x-tokens
    """
    if len(pairs) > config.T_max:
        raise SequenceLengthError(f"{len(pairs)} pairs exceed T_max={config.T_max}")
    n_tokens = 2 * len(pairs) + (query is not None)
    if n_tokens > config.max_tokens:
        raise SequenceLengthError(f"{n_tokens} tokens exceed max_tokens={config.max_tokens}")

    D_s = config.D_s
    tokens = []
    positions = []
    for y, label in pairs:
        positions.append(len(tokens))
        tokens.append(y_tokens(np.atleast_1d(y), D_s))
        tokens.append(x_tokens(_label_index(label, config.n_classes), D_s))
    if query is not None:
        positions.append(len(tokens))
        tokens.append(y_tokens(np.atleast_1d(query), D_s))

    array = np.stack(tokens) if tokens else np.zeros((0, D_s))
    return TokenSequence(tokens=array, y_positions=positions)


def tokenize_frames(y: np.ndarray, labels: np.ndarray, D_s: int) -> np.ndarray:
    """
    Batch tokenizer for stacked frames

    Args:
        y: (B, T, N_r) received vectors
        labels: (B, T) or (B, T-1) joint-symbol indices placed in the x-tokens
        D_s: Token width

    Returns:
        (B, 2T-1, D_s) float64 token array
    """
    T = y.shape[1]
    return interleave(y_tokens(y, D_s), x_tokens(labels[:, : T - 1], D_s))
