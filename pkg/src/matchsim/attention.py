"""Feature-wise multi-head attention over a single state vector.

Each head scores the m features with ``S @ W + b``, softmaxes the scores,
and reweights the features elementwise. Heads are concatenated, giving an
``H * m`` representation. Rows of ``S`` are independent states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import ShapeError, Tensor


@dataclass
class AttentionParams:
    heads: list[tuple[Tensor, Tensor]]

    @property
    def H(self) -> int:
        return len(self.heads)

    @property
    def m(self) -> int:
        return self.heads[0][0].shape[0]

    @classmethod
    def build(cls, m: int, H: int, seed: int) -> AttentionParams:
        if H < 1:
            raise ShapeError("need at least one head")
        seeds = np.random.SeedSequence(seed).generate_state(H)
        return cls([(nn.init_params((m, m), int(s)), nn.init_params((1, m), 0, zero=True)) for s in seeds])

    def tensors(self) -> list[Tensor]:
        return [t for head in self.heads for t in head]


@dataclass
class EnhancedState:
    per_head_weights: list[np.ndarray]  # H arrays of shape (N, m)
    combined: Tensor  # (N, H*m)


def _as_rows(S) -> Tensor:
    S = nn.as_tensor(S)
    if S.value.ndim == 1:
        S = Tensor(S.value[None, :])
    return S


def head_scores(S, head: tuple[Tensor, Tensor]) -> Tensor:
    W, b = head
    S = _as_rows(S)
    if S.shape[1] != W.shape[0] or W.shape[0] != W.shape[1] or b.shape != (1, W.shape[1]):
        raise ShapeError(f"state width {S.shape[1]} incompatible with head W{W.shape} b{b.shape}")
    return nn.affine(S, W, b)


def normalize_scores(alpha: Tensor) -> Tensor:
    if not np.all(np.isfinite(alpha.value)):
        raise nn.NumericError("attention scores must be finite")
    return nn.softmax(alpha)


def weight_features(beta: Tensor, S) -> Tensor:
    S = _as_rows(S)
    if beta.shape != S.shape:
        raise ShapeError(f"weights {beta.shape} vs features {S.shape}")
    return nn.mul(beta, S)


def enhance_state(S, params: AttentionParams) -> EnhancedState:
    S = _as_rows(S)
    if S.shape[1] != params.m:
        raise ShapeError(f"state width {S.shape[1]} != attention width {params.m}")
    betas, parts = [], []
    for head in params.heads:
        beta = normalize_scores(head_scores(S, head))
        betas.append(beta.value)
        parts.append(weight_features(beta, S))
    return EnhancedState(betas, nn.concat(parts, axis=1))
