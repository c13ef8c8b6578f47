"""Multi-head causal self-attention with two score-reporting modes.

FULL materializes the per-head score matrices. CUMULATIVE_ONLY computes
attention blockwise, never holding an NxN matrix, and reports only the
per-key cumulative score vector -- the signal an efficient fused kernel
can return. Both modes produce the same context and the same cumulative
scores (up to float reordering), which is what lets every downstream
token-reduction decision run from the cumulative vector alone.

Token importance, engine-wide, is the head-averaged causally-masked
column sum of attention probabilities (raw, not renormalized per layer).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .numerics import Matrix

_BLOCK = 256


class AttentionMode(Enum):
    FULL = "full"
    CUMULATIVE_ONLY = "cumulative_only"


@dataclass(frozen=True)
class AttentionWeights:
    """Packed projections; head h owns columns [h*hd, (h+1)*hd)."""

    n_heads: int
    wq: Matrix
    wk: Matrix
    wv: Matrix
    wo: Matrix

    def __post_init__(self):
        c = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            w = getattr(self, name)
            if w.shape != (c, c):
                raise ValueError(f"{name} must be ({c}x{c}), got {w.shape}")
        if self.n_heads < 1 or c % self.n_heads != 0:
            raise ValueError(f"head count {self.n_heads} must divide model dim {c}")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.wq.shape[0] // self.n_heads


@dataclass
class AttentionOutput:
    context: Matrix                       # (N, C), after output projection
    cum_scores: np.ndarray                # (H, N) per-key column sums
    avg_cum_scores: np.ndarray            # (N,) head average
    keys: np.ndarray                      # (H, N, hd)
    values: np.ndarray                    # (H, N, hd)
    full_scores: Optional[np.ndarray]     # (H, N, N) in FULL mode, else None


def _project_heads(hidden: Matrix, w: Matrix, n_heads: int) -> np.ndarray:
    n, c = hidden.shape
    return (hidden @ w).reshape(n, n_heads, c // n_heads).transpose(1, 0, 2)


def multi_head_attention(
    hidden: Matrix,
    weights: AttentionWeights,
    mode: AttentionMode = AttentionMode.CUMULATIVE_ONLY,
) -> AttentionOutput:
    hidden = np.asarray(hidden, dtype=np.float32)
    if hidden.ndim != 2 or hidden.shape[0] < 1:
        raise ValueError(f"hidden must be a nonempty 2-D matrix, got shape {hidden.shape}")
    if hidden.shape[1] != weights.dim:
        raise ValueError(f"hidden dim {hidden.shape[1]} != weight dim {weights.dim}")

    n = hidden.shape[0]
    h = weights.n_heads
    hd = weights.head_dim
    scale = np.float32(1.0 / np.sqrt(hd))

    q = _project_heads(hidden, weights.wq, h)
    k = _project_heads(hidden, weights.wk, h)
    v = _project_heads(hidden, weights.wv, h)

    kt = np.ascontiguousarray(k.transpose(0, 2, 1))
    if mode is AttentionMode.FULL:
        logits = (q @ kt) * scale
        mask = np.triu(np.ones((n, n), dtype=bool), k=1)
        logits = np.where(mask[None, :, :], np.float32(-np.inf), logits)
        logits -= logits.max(axis=2, keepdims=True)
        e = np.exp(logits)
        scores = e / e.sum(axis=2, keepdims=True)
        ctx_heads = scores @ v
        cum = scores.sum(axis=1)
        full = scores
    else:
        ctx_heads = np.empty((h, n, hd), dtype=np.float32)
        cum = np.zeros((h, n), dtype=np.float32)
        cols = np.arange(n)
        for s in range(0, n, _BLOCK):
            e_ = min(s + _BLOCK, n)
            logits = (q[:, s:e_] @ kt) * scale
            mask = cols[None, :] > np.arange(s, e_)[:, None]
            logits = np.where(mask[None, :, :], np.float32(-np.inf), logits)
            logits -= logits.max(axis=2, keepdims=True)
            eb = np.exp(logits)
            sb = eb / eb.sum(axis=2, keepdims=True)
            cum += sb.sum(axis=1)
            ctx_heads[:, s:e_] = sb @ v
        full = None

    context = ctx_heads.transpose(1, 0, 2).reshape(n, h * hd) @ weights.wo
    avg = cum.mean(axis=0)
    return AttentionOutput(
        context=context,
        cum_scores=cum,
        avg_cum_scores=avg,
        keys=k,
        values=v,
        full_scores=full,
    )


def cumulative_scores_from_full(full_scores: np.ndarray, tol: float = 1e-4) -> np.ndarray:
    """Per-key column sums over all query rows; one (N,) vector per head.

    This is the single definition of token-importance input used
    engine-wide. Rows must be stochastic (sum to 1 within tol).
    """
    s = np.asarray(full_scores, dtype=np.float32)
    if s.ndim == 2:
        s = s[None]
    if s.ndim != 3 or s.shape[1] != s.shape[2]:
        raise ValueError(f"expected per-head square score matrices, got shape {s.shape}")
    row_sums = s.sum(axis=2)
    if np.abs(row_sums - 1.0).max() > tol:
        worst = float(np.abs(row_sums - 1.0).max())
        raise ValueError(f"score rows are not stochastic (max |row sum - 1| = {worst:.3g})")
    return s.sum(axis=1)


def attend_single_query(q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """One decode-time query against a head's cached keys/values."""
    scale = np.float32(1.0 / np.sqrt(keys.shape[1]))
    s = keys @ (q * scale)
    s -= s.max()
    e = np.exp(s)
    e /= e.sum()
    return e @ values
