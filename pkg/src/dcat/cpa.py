"""Cross-patch attention fusion between the two token streams.

One round runs two directions from the same pre-round snapshot (global
queries attend over mip tokens, mip queries attend over global tokens) and
merges both results, so the round is symmetric under branch swap when the
weights are. Per direction: rank the source patches by class attention, keep
the top share, project [cls] + survivors into the destination width, attend
over every destination row, project back, and add each update onto the row
it came from. Rows that were not selected pass through bitwise unchanged.

The class-only variant (`cca_round`) is the comparison baseline: only the
class token crosses branches and patch rows are rebuilt by concatenation so
they stay bitwise identical.
"""

from __future__ import annotations

import numpy as np

from dcat.ranking import build_query_set, class_attention, select_top
from dcat.tensor import (
    ShapeError,
    Tensor,
    add,
    concat_rows,
    gather_rows,
    layer_norm,
    matmul,
    merge_heads,
    scale,
    scatter_add_rows,
    softmax_rows,
    split_heads,
    transpose,
)
from dcat.vit import TokenBatch, trunc_normal

__all__ = ["CpaRound", "cpa_direction", "cca_direction"]


def _direction_params(d_src: int, d_dst: int, rng, dtype, with_ranking: bool) -> dict:
    def w(*shape):
        return Tensor(trunc_normal(rng, shape, dtype=dtype), trainable=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), trainable=True)

    params = {}
    if with_ranking:
        # Identity start: ranking reduces to cls/token similarity in the
        # source feature space. Selection carries no gradient, so these are
        # never updated; identity keeps the scores meaningful as the
        # backbone trains instead of freezing an arbitrary random form.
        params["rank.wq"] = Tensor(np.eye(d_src, dtype=dtype), trainable=True)
        params["rank.wk"] = Tensor(np.eye(d_src, dtype=dtype), trainable=True)
    params.update({
        "src_ln.g": Tensor(np.ones(d_src, dtype=dtype), trainable=True),
        "src_ln.b": zeros(d_src),
        "q.w": w(d_src, d_dst), "q.b": zeros(d_dst),
        "dst_ln.g": Tensor(np.ones(d_dst, dtype=dtype), trainable=True),
        "dst_ln.b": zeros(d_dst),
        "k.w": w(d_dst, d_dst), "k.b": zeros(d_dst),
        "v.w": w(d_dst, d_dst), "v.b": zeros(d_dst),
        "out.w": w(d_dst, d_src), "out.b": zeros(d_src),
    })
    return params


def _cross_attend(queries: Tensor, dst: TokenBatch, params: dict, dst_heads: int,
                  record=None, record_key=None) -> Tensor:
    """Attend `queries` (already in source width) over all destination rows.

    Returns per-query context vectors projected back to the source width.
    """
    q = split_heads(add(matmul(queries, params["q.w"]), params["q.b"]), dst_heads)
    dst_n = layer_norm(dst.tokens, params["dst_ln.g"], params["dst_ln.b"])
    k = split_heads(add(matmul(dst_n, params["k.w"]), params["k.b"]), dst_heads)
    v = split_heads(add(matmul(dst_n, params["v.w"]), params["v.b"]), dst_heads)
    d_dst = dst.dim
    attn = softmax_rows(scale(matmul(q, transpose(k)), (d_dst // dst_heads) ** -0.5))
    if record is not None and record_key is not None:
        branch, stage, kind = record_key
        record.add_attention(branch, stage, kind, attn.data.mean(axis=1))
    ctx = merge_heads(matmul(attn, v))
    return add(matmul(ctx, params["out.w"]), params["out.b"])


def _require_canonical(batch: TokenBatch) -> None:
    expect = np.arange(batch.rows, dtype=np.int64)
    if not np.array_equal(batch.origin_index[0], expect):
        raise ShapeError("fusion expects full sequences in canonical row order")


def cpa_direction(src: TokenBatch, dst: TokenBatch, params: dict, alpha: float,
                  src_heads: int, dst_heads: int, record=None,
                  query_rows: np.ndarray | None = None) -> TokenBatch:
    """One fusion direction: ranked source queries read the destination.

    `query_rows` overrides ranking with explicit row indices (class token is
    row 0); used by the class-only baseline and by diagnostics.
    """
    _require_canonical(src)
    src_n = layer_norm(src.tokens, params["src_ln.g"], params["src_ln.b"])
    normed = src.with_tokens(src_n)
    stage = record.next_stage(src.branch) if record is not None else None

    if query_rows is None:
        scores = class_attention(normed, params["rank.wq"], params["rank.wk"], src_heads)
        sel = select_top(scores, alpha)
        qset = build_query_set(normed, sel)
        rows = qset.origin_index
        if record is not None:
            record.add_attention(src.branch, stage, "ranking", scores)
            record.add_kept(src.branch, stage, "ranking", sel.kept)
    else:
        rows = np.broadcast_to(
            np.asarray(query_rows, dtype=np.int64), (src.tokens.shape[0], len(query_rows))).copy()
        qset = TokenBatch(gather_rows(src_n, rows), rows, src.branch)

    key = (src.branch, stage, "cpa") if record is not None else None
    ctx = _cross_attend(qset.tokens, dst, params, dst_heads, record=record, record_key=key)
    updated = add(src.tokens, scatter_add_rows(ctx, rows, src.rows))
    out = src.with_tokens(updated)
    if record is not None:
        record.add_features(src.branch, stage, "fusion", updated.data)
    return out


def cca_direction(src: TokenBatch, dst: TokenBatch, params: dict,
                  dst_heads: int, record=None) -> TokenBatch:
    """Class-only exchange: the class token reads the destination rows.

    Patch rows are carried over by concatenation, untouched bit for bit.
    """
    _require_canonical(src)
    b = src.tokens.shape[0]
    src_n = layer_norm(src.tokens, params["src_ln.g"], params["src_ln.b"])
    cls_rows = np.zeros((b, 1), dtype=np.int64)
    cls_query = gather_rows(src_n, cls_rows)
    stage = record.next_stage(src.branch) if record is not None else None
    key = (src.branch, stage, "cca") if record is not None else None
    ctx = _cross_attend(cls_query, dst, params, dst_heads, record=record, record_key=key)
    new_cls = add(gather_rows(src.tokens, cls_rows), ctx)
    patch_rows = np.broadcast_to(
        np.arange(1, src.rows, dtype=np.int64), (b, src.rows - 1)).copy()
    patches = gather_rows(src.tokens, patch_rows)
    merged = concat_rows([new_cls, patches])
    out = src.with_tokens(merged)
    if record is not None:
        record.add_features(src.branch, stage, "fusion", merged.data)
    return out


class CpaRound:
    """Owned weights for one bidirectional fusion round.

    mode "cpa" ranks and crosses patch subsets; mode "cca" exchanges class
    tokens only (no ranking projections are allocated in that mode).
    """

    def __init__(self, d_global: int, d_mip: int, heads_global: int, heads_mip: int,
                 rng: np.random.Generator, dtype=np.float32, mode: str = "cpa",
                 ranked: bool = True):
        if mode not in ("cpa", "cca"):
            raise ValueError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self.ranked = ranked
        self.heads_global = heads_global
        self.heads_mip = heads_mip
        # Identity-initialized ranking weights draw nothing from the rng, so
        # configurations with and without them see identical later draws.
        with_rank = mode == "cpa" and ranked
        g2m = _direction_params(d_global, d_mip, rng, dtype, with_rank)
        m2g = _direction_params(d_mip, d_global, rng, dtype, with_rank)
        self.params = {f"g2m.{k}": v for k, v in g2m.items()}
        self.params.update({f"m2g.{k}": v for k, v in m2g.items()})

    def _split(self, prefix: str) -> dict:
        plen = len(prefix) + 1
        return {k[plen:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def __call__(self, g: TokenBatch, m: TokenBatch, alpha_global: float,
                 alpha_mip: float, record=None):
        """Apply both directions to the same pre-round snapshot."""
        g2m, m2g = self._split("g2m"), self._split("m2g")
        if self.mode == "cca":
            g_new = cca_direction(g, m, g2m, self.heads_mip, record=record)
            m_new = cca_direction(m, g, m2g, self.heads_global, record=record)
        elif not self.ranked:
            # Ranking off: every row queries, in natural order.
            g_new = cpa_direction(g, m, g2m, 1.0, self.heads_global, self.heads_mip,
                                  record=record, query_rows=np.arange(g.rows))
            m_new = cpa_direction(m, g, m2g, 1.0, self.heads_mip, self.heads_global,
                                  record=record, query_rows=np.arange(m.rows))
        else:
            g_new = cpa_direction(g, m, g2m, alpha_global,
                                  self.heads_global, self.heads_mip, record=record)
            m_new = cpa_direction(m, g, m2g, alpha_mip,
                                  self.heads_mip, self.heads_global, record=record)
        return g_new, m_new
