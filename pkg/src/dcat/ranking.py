"""Class-attention token ranking and hard top-k selection.

Ranking scores patch tokens by how strongly the class token attends to them:
softmax over the full row of cls-query attention, head-averaged, then the
class column is dropped and the remainder renormalized so patch scores sum
to one. Selection keeps the ceil(alpha * N) best patches, breaking ties in
favor of the lower index.

Selection is hard and carries no gradient; scores are therefore computed
outside the tape on raw arrays. Gradients flow through the *values* of the
selected tokens only (the gather), never through the choice itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dcat.tensor import ShapeError, Tensor, concat_rows, gather_rows
from dcat.vit import TokenBatch

__all__ = ["RankingResult", "class_attention", "select_top", "build_query_set"]


@dataclass
class RankingResult:
    """Patch scores and the surviving patch indices.

    scores: [batch, N] renormalized class-attention mass per patch token.
    kept: [batch, k] patch indices (0-based, class token excluded), unique
    and sorted ascending per sample. keep_ratio is the alpha that was applied.
    """

    scores: np.ndarray
    kept: np.ndarray
    keep_ratio: float

    def __post_init__(self):
        if self.scores.ndim != 2 or self.kept.ndim != 2:
            raise ShapeError("RankingResult arrays must be [batch, ...]")
        if self.kept.shape[0] != self.scores.shape[0]:
            raise ShapeError("scores and kept disagree on batch size")


def class_attention(batch: TokenBatch, wq, wk, heads: int) -> np.ndarray:
    """Head-averaged attention of the class token over patch tokens.

    Returns [batch, N] scores summing to 1 per sample (class column dropped,
    remainder renormalized). Computed on raw arrays: selection never carries
    gradient, so the tape is deliberately bypassed.
    """
    x = batch.tokens.data
    wq = wq.data if isinstance(wq, Tensor) else np.asarray(wq)
    wk = wk.data if isinstance(wk, Tensor) else np.asarray(wk)
    b, t, d = x.shape
    if t < 2:
        raise ShapeError("class_attention needs at least one patch token")
    if wq.shape != (d, d) or wk.shape != (d, d):
        raise ShapeError(f"ranking projections must be ({d}, {d}), got {wq.shape} and {wk.shape}")
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    hd = d // heads

    q = (x[:, 0, :] @ wq).reshape(b, heads, hd)
    k = (x @ wk).reshape(b, t, heads, hd).transpose(0, 2, 1, 3)  # [B, S, T, hd]
    logits = np.einsum("bsh,bsth->bst", q, k) / math.sqrt(hd)
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=-1, keepdims=True)  # [B, S, T] rows over all tokens
    mean = probs.mean(axis=1)  # head average
    patch_mass = mean[:, 1:]
    total = patch_mass.sum(axis=-1, keepdims=True)
    return patch_mass / total


def select_top(scores: np.ndarray, alpha: float) -> RankingResult:
    """Keep the ceil(alpha * N) highest-scoring patches per sample.

    Ties break toward the lower index (stable sort on descending score).
    alpha must lie in (0, 1]; the kept set is never empty.
    """
    scores = np.asarray(scores)
    squeeze = scores.ndim == 1
    if squeeze:
        scores = scores[None, :]
    if scores.ndim != 2:
        raise ShapeError(f"select_top needs [N] or [batch, N] scores, got {scores.shape}")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"keep ratio must be in (0, 1], got {alpha}")
    n = scores.shape[1]
    k = min(n, max(1, math.ceil(alpha * n)))
    # Stable sort on the negated scores: equal scores keep ascending index
    # order, so the lower index wins the tie for the last slot.
    order = np.argsort(-scores, axis=1, kind="stable")
    kept = np.sort(order[:, :k], axis=1)
    return RankingResult(scores=scores, kept=kept, keep_ratio=float(alpha))


def build_query_set(batch: TokenBatch, result: RankingResult) -> TokenBatch:
    """Gather [class token] + selected patches into a smaller TokenBatch.

    Gradients flow into the gathered rows; origin_index tracks where each
    surviving row sits in the donor sequence so updates can scatter home.
    """
    b, t = batch.tokens.shape[:2]
    if result.kept.shape[0] != b:
        raise ShapeError(f"ranking batch {result.kept.shape[0]} does not match tokens batch {b}")
    if result.kept.size and result.kept.max() >= t - 1:
        raise IndexError("kept patch index exceeds patch count")
    rows = np.concatenate(
        [np.zeros((b, 1), dtype=np.int64), result.kept.astype(np.int64) + 1], axis=1)
    picked = gather_rows(batch.tokens, rows)
    origin = np.take_along_axis(batch.origin_index, rows, axis=1)
    return TokenBatch(picked, origin, batch.branch)
