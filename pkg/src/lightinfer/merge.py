"""Token sequences and staged image-token merging.

Image tokens are reduced at scheduled layers: the highest-importance
tokens survive untouched, the low-importance tail collapses into a
single weighted-sum token. Text tokens (system prompt, instruction,
generated) are never touched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

import numpy as np

from .numerics import Matrix


class Segment(IntEnum):
    SYSTEM_PROMPT = 0
    IMAGE = 1
    INSTRUCTION = 2
    GENERATED = 3
    MERGED_IMAGE = 4


# Merged tokens stay image-kind: later merge stages and cache compression
# treat them like any other image token.
IMAGE_SEGMENTS = (Segment.IMAGE, Segment.MERGED_IMAGE)


def is_image_segment(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes)
    return (codes == Segment.IMAGE) | (codes == Segment.MERGED_IMAGE)


@dataclass
class TokenSequence:
    """Embeddings plus per-token segment labels and original position ids."""

    embeddings: Matrix            # (N, C) float32
    segments: np.ndarray          # (N,) int8 Segment codes
    positions: np.ndarray         # (N,) int64 original position ids

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        self.segments = np.asarray(self.segments, dtype=np.int8)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        n = self.embeddings.shape[0]
        if self.segments.shape != (n,) or self.positions.shape != (n,):
            raise ValueError(
                f"field lengths disagree: {n} embeddings, "
                f"{self.segments.shape[0]} segments, {self.positions.shape[0]} positions"
            )

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def image_mask(self) -> np.ndarray:
        return is_image_segment(self.segments)

    def image_indices(self) -> np.ndarray:
        return np.flatnonzero(self.image_mask())

    @property
    def n_image(self) -> int:
        return int(self.image_mask().sum())

    @property
    def n_text(self) -> int:
        return len(self) - self.n_image


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def plan_keep_counts(n_image: int, target_ratio: float, n_stages: int) -> list[int]:
    """Per-stage retained image-token counts for a staged reduction.

    Each stage keeps a target_ratio**(1/n_stages) fraction of the
    previous stage's count, rounded half-up, floored at 1 token.
    """
    if not (0.0 < target_ratio <= 1.0):
        raise ValueError(f"target_ratio must be in (0, 1], got {target_ratio}")
    if n_stages < 1:
        raise ValueError(f"n_stages must be >= 1, got {n_stages}")
    if n_image < 1:
        raise ValueError(f"n_image must be >= 1, got {n_image}")
    stage_ratio = target_ratio ** (1.0 / n_stages)
    counts = []
    cur = n_image
    for _ in range(n_stages):
        cur = max(1, round_half_up(cur * stage_ratio))
        counts.append(cur)
    return counts


@dataclass(frozen=True)
class MergeSchedule:
    """Which layers merge and how many image tokens each stage keeps."""

    merge_layers: tuple[int, ...] = (5, 9, 13)
    target_ratio: float = 0.35
    keep_counts: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        layers = tuple(self.merge_layers)
        object.__setattr__(self, "merge_layers", layers)
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ValueError(f"merge_layers must be strictly increasing, got {layers}")
        if layers and layers[0] < 0:
            raise ValueError(f"merge_layers must be >= 0, got {layers}")
        if not (0.0 < self.target_ratio <= 1.0):
            raise ValueError(f"target_ratio must be in (0, 1], got {self.target_ratio}")
        if self.keep_counts is not None:
            kc = tuple(int(c) for c in self.keep_counts)
            object.__setattr__(self, "keep_counts", kc)
            if len(kc) != len(layers):
                raise ValueError(f"{len(kc)} keep_counts for {len(layers)} merge layers")
            if any(b > a for a, b in zip(kc, kc[1:])):
                raise ValueError(f"keep_counts must be non-increasing, got {kc}")

    def resolve(self, n_image: int) -> "MergeSchedule":
        """Fill keep_counts for a concrete image-token count."""
        if not self.merge_layers:
            return MergeSchedule((), self.target_ratio, ())
        counts = plan_keep_counts(n_image, self.target_ratio, len(self.merge_layers))
        if abs(counts[-1] - n_image * self.target_ratio) > 1.0 + 1e-9:
            raise ValueError(
                f"staged counts {counts} land {counts[-1]} tokens, more than 1 away "
                f"from target {n_image * self.target_ratio:.2f}"
            )
        return MergeSchedule(self.merge_layers, self.target_ratio, tuple(counts))


@dataclass(frozen=True)
class MergePartition:
    """Index split of the image tokens of one layer.

    Indices are into the image-token list (stored order), not the full
    sequence. unmerged is ascending; merged is sorted by descending
    importance (ties broken by lower index, i.e. earlier position).
    """

    unmerged: np.ndarray
    merged: np.ndarray


def partition_tokens(importance: np.ndarray, r: int) -> MergePartition:
    imp = np.asarray(importance, dtype=np.float32)
    n = imp.shape[0]
    if not 0 <= r <= n - 1:
        raise ValueError(f"r must be in [0, {n - 1}] for {n} image tokens, got {r}")
    # lexsort: primary key -importance, secondary key index (stable tie-break)
    order = np.lexsort((np.arange(n), -imp))
    n_keep = n - (r + 1)
    return MergePartition(
        unmerged=np.sort(order[:n_keep]),
        merged=order[n_keep:].copy(),
    )


def merge_weights(r: int) -> np.ndarray:
    """Descending weights {r+1, r, ..., 1}, normalized to sum to 1.

    The raw list would inflate the merged embedding's norm by O(r^2);
    normalizing keeps the result a convex combination.
    """
    if r < 0:
        raise ValueError(f"r must be >= 0, got {r}")
    raw = np.arange(r + 1, 0, -1, dtype=np.float32)
    return raw / raw.sum()


def merge_tokens(merged_rows: Matrix) -> np.ndarray:
    """Collapse rows (descending-importance order) into one weighted sum."""
    rows = np.asarray(merged_rows, dtype=np.float32)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ValueError(f"merged_rows must be a nonempty 2-D matrix, got shape {rows.shape}")
    return merge_weights(rows.shape[0] - 1) @ rows


def pyramid_merge_layer(seq: TokenSequence, importance: np.ndarray, keep_count: int) -> TokenSequence:
    """One merge stage: keep keep_count image tokens, collapse the rest.

    importance[i] scores the i-th image token in stored order. Output
    keeps keep_count-1 top-importance originals in their stored order,
    followed by one MERGED_IMAGE token whose position id is one past the
    last retained original (or the first image slot if none survive).
    Non-image tokens pass through bit-identical.
    """
    img_idx = seq.image_indices()
    n_img = img_idx.shape[0]
    imp = np.asarray(importance, dtype=np.float32)
    if imp.shape[0] != n_img:
        raise ValueError(f"{imp.shape[0]} importance scores for {n_img} image tokens")
    if keep_count < 1:
        raise ValueError(f"keep_count must be >= 1, got {keep_count}")
    if keep_count > n_img:
        raise ValueError(f"keep_count {keep_count} exceeds image-token count {n_img}")
    if keep_count == n_img:
        return seq

    part = partition_tokens(imp, n_img - keep_count)
    merged_stored = img_idx[part.merged]
    new_row = merge_tokens(seq.embeddings[merged_stored])

    if part.unmerged.size:
        insert_after = int(img_idx[part.unmerged[-1]])
        new_pos = int(seq.positions[insert_after]) + 1
    else:
        insert_after = int(img_idx[0]) - 1
        new_pos = int(seq.positions[img_idx[0]])

    keep = np.ones(len(seq), dtype=bool)
    keep[merged_stored] = False
    kept = np.flatnonzero(keep)
    at = int(np.searchsorted(kept, insert_after, side="right"))

    emb = np.concatenate(
        [seq.embeddings[kept[:at]], new_row[None, :], seq.embeddings[kept[at:]]], axis=0
    )
    segs = np.concatenate(
        [seq.segments[kept[:at]], np.array([Segment.MERGED_IMAGE], dtype=np.int8), seq.segments[kept[at:]]]
    )
    poss = np.concatenate(
        [seq.positions[kept[:at]], np.array([new_pos], dtype=np.int64), seq.positions[kept[at:]]]
    )
    return TokenSequence(emb, segs, poss)
