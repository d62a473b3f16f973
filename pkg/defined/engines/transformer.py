"""
Decoder-only detector: linear token embedding, learned absolute positions,
pre-norm blocks with causal multi-head attention and a ReLU feed-forward
network, final norm and a bias-free classification head.

Logits are read at every y-token (even sequence positions). Gradients come
from autograd on the masked cross-entropy.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
import torch
import torch.nn as nn
import torch.nn.functional as F

from defined.config.logging_config import describe_array
from defined.config.run_configs import ModelConfig
from defined.engines.tokenizer import tokenize, tokenize_frames
from defined.errors import EmptyLossMaskError, NumericalInstabilityError, SequenceLengthError

logger = structlog.get_logger()


@dataclass
class ForwardPass:
    logits: torch.Tensor  # (B, n_y, n_classes), one row per y-token
    activations: List[torch.Tensor] = field(default_factory=list)  # residual stream after embedding and each layer


class CausalSelfAttention(nn.Module):
    def __init__(self, d_e: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_k = d_e // n_heads
        self.W_Q = nn.Linear(d_e, d_e, bias=False)
        self.W_K = nn.Linear(d_e, d_e, bias=False)
        self.W_V = nn.Linear(d_e, d_e, bias=False)
        self.W_O = nn.Linear(d_e, d_e, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, n, d_e = x.shape

        def split(t):
            return t.view(B, n, self.n_heads, self.d_k).transpose(1, 2)

        q, k, v = split(self.W_Q(x)), split(self.W_K(x)), split(self.W_V(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_k)
        future = torch.triu(torch.ones(n, n, dtype=torch.bool, device=x.device), diagonal=1)
        scores = scores.masked_fill(future, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        heads = (weights @ v).transpose(1, 2).reshape(B, n, d_e)
        return self.W_O(heads)


class DecoderBlock(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(config.d_e, eps=config.layer_norm_eps)
        self.attention = CausalSelfAttention(config.d_e, config.n_heads)
        self.norm2 = nn.LayerNorm(config.d_e, eps=config.layer_norm_eps)
        self.W_1 = nn.Linear(config.d_e, config.d_ff)
        self.W_2 = nn.Linear(config.d_ff, config.d_e)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(self.norm1(x))
        return x + self.W_2(F.relu(self.W_1(self.norm2(x))))


class DecisionFeedbackTransformer(nn.Module):
    """
    In-context symbol detector

    Inputs are (B, n, D_s) token tensors that start with a y-token and
    alternate y, x, y, ...; outputs are class logits at each y-token.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.A = nn.Linear(config.D_s, config.d_e, bias=False)
        self.P = nn.Parameter(torch.zeros(config.max_tokens, config.d_e))
        self.layers = nn.ModuleList([DecoderBlock(config) for _ in range(config.n_layers)])
        self.final_norm = nn.LayerNorm(config.d_e, eps=config.layer_norm_eps)
        self.W_c = nn.Linear(config.d_e, config.n_classes, bias=False)
        self.reset_parameters()

    def reset_parameters(self, generator: Optional[torch.Generator] = None):
        """normal(0, init_std) weights, zero biases, unit LayerNorm scales"""
        with torch.no_grad():
            for name, parameter in self.named_parameters():
                if "norm" in name:
                    parameter.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith("bias"):
                    parameter.zero_()
                else:
                    parameter.normal_(0.0, self.config.init_std, generator=generator)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, tokens: torch.Tensor) -> ForwardPass:
        n = tokens.shape[1]
        if n > self.config.max_tokens:
            raise SequenceLengthError(f"{n} tokens exceed max_tokens={self.config.max_tokens}")

        h = self.A(tokens.to(self.P.dtype)) + self.P[:n]
        activations = [h]
        for layer_index, layer in enumerate(self.layers):
            h = layer(h)
            if not torch.isfinite(h).all():
                logger.error("non_finite_activation", layer=layer_index, **describe_array(h, "activation"))
                raise NumericalInstabilityError(layer_index)
            activations.append(h)

        logits = self.W_c(self.final_norm(h[:, 0::2]))
        if not torch.isfinite(logits).all():
            raise NumericalInstabilityError(len(self.layers))
        return ForwardPass(logits=logits, activations=activations)

    def predict(
        self, pairs: Sequence[Tuple[np.ndarray, int]], y_query: np.ndarray
    ) -> Tuple[np.ndarray, int]:
        """
        Detect the symbol behind y_query given in-context pairs

        Returns:
            (class probabilities, argmax index with ties to the lowest index)
        """
        if len(pairs) > self.config.T_max - 1:
            raise SequenceLengthError(f"{len(pairs)} context pairs exceed T_max - 1")
        sequence = tokenize(pairs, y_query, self.config)
        tokens = torch.as_tensor(sequence.tokens[None], dtype=self.P.dtype)
        with torch.no_grad():
            logits = self(tokens).logits[0, -1]
        probabilities = torch.softmax(logits.double(), dim=-1).numpy()
        return probabilities, int(np.argmax(probabilities))


def decode_with_feedback(
    model: DecisionFeedbackTransformer,
    y: np.ndarray,
    x_indices: np.ndarray,
    k: int,
    oracle_feedback: bool = False,
    detect_last: bool = True,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Decision-feedback decoding of a frame batch with frozen weights

    Positions below k keep their true labels. For t = k+1..T-1 the x-token
    is replaced by the model's argmax decision for y_t before y_{t+1} is
    detected. Every pass runs on the full-length sequence; causal masking
    makes the logits at y_t independent of the tokens after it.

    Args:
        model: Detector, used without gradients
        y: (B, T, N_r) received vectors
        x_indices: (B, T) true joint-symbol indices
        k: Pilot count
        oracle_feedback: Feed back the true labels instead of decisions
        detect_last: Also run the pass that detects y_T

    Returns:
        (labels (B, T) as placed in the prompt, decisions (B, T-k) or (B, T-k-1))
    """
    T = y.shape[1]
    if not 1 <= k < T:
        raise ValueError(f"need 1 <= k < T, got k={k}, T={T}")

    labels = np.array(x_indices, dtype=int, copy=True)
    last = T if detect_last else T - 1
    decisions = np.empty((y.shape[0], last - k), dtype=int)
    dtype = model.P.dtype
    with torch.no_grad():
        for t in range(k, last):
            tokens = torch.as_tensor(tokenize_frames(y, labels, model.config.D_s), dtype=dtype)
            decided = model(tokens).logits[:, t].argmax(dim=-1).numpy()
            decisions[:, t - k] = decided
            if not oracle_feedback and t < T - 1:
                labels[:, t] = decided
    return labels, decisions


def masked_cross_entropy(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over the y-positions selected by mask"""
    if not bool(mask.any()):
        raise EmptyLossMaskError("loss mask selects no positions")
    losses = F.cross_entropy(logits.transpose(1, 2), targets, reduction="none")
    return losses[mask].mean()


def batch_loss(
    model: DecisionFeedbackTransformer,
    tokens: torch.Tensor,
    targets: torch.Tensor,
    mask: torch.Tensor,
) -> torch.Tensor:
    """
    Masked cross-entropy of a token batch

    Args:
        model: Detector
        tokens: (B, n, D_s) sequences
        targets: (B, n_y) true joint-symbol index at each y-token
        mask: (B, n_y) bool, True where the position is supervised
    """
    return masked_cross_entropy(model(tokens).logits, targets, mask)


def loss_and_grads(
    model: DecisionFeedbackTransformer,
    tokens: torch.Tensor,
    targets: torch.Tensor,
    mask: torch.Tensor,
) -> Tuple[float, Dict[str, torch.Tensor]]:
    """
    Loss value and its exact gradient for every named parameter

    Returns:
        (loss, {parameter name: gradient tensor of the parameter's shape})
    """
    names, parameters = zip(*model.named_parameters())
    loss = batch_loss(model, tokens, targets, mask)
    grads = torch.autograd.grad(loss, parameters, allow_unused=True)
    gradients = {
        name: grad if grad is not None else torch.zeros_like(parameter)
        for name, parameter, grad in zip(names, parameters, grads)
    }
    return float(loss.detach()), gradients


def parameter_checksum(model: nn.Module) -> float:
    """Order-sensitive checksum of all parameters"""
    with torch.no_grad():
        return float(
            sum((i + 1) * p.double().sum() for i, p in enumerate(model.parameters()))
        )
