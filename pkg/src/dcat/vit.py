"""Vision-transformer building blocks: patch embedding and encoder blocks.

Token layout convention used everywhere downstream: row 0 of each sample is
the class token, rows 1..N are patch tokens in row-major grid order
(left-to-right, top-to-bottom). `TokenBatch.origin_index` carries each row's
position in that canonical order so selection stages can put updates back
where they belong.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dcat.tensor import (
    Tensor,
    ShapeError,
    add,
    concat_rows,
    gelu,
    layer_norm,
    matmul,
    merge_heads,
    scale,
    softmax_rows,
    split_heads,
    transpose,
)

__all__ = [
    "TokenBatch",
    "PatchEmbedder",
    "EncoderBlock",
    "trunc_normal",
    "extract_patches",
    "mhsa",
    "encoder_stack",
]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


@dataclass
class TokenBatch:
    """A batch of token sequences plus each row's canonical position.

    tokens: Tensor [batch, rows, dim]; origin_index: int64 [batch, rows];
    branch: which tower the rows belong to ("global" or "mip").
    """

    tokens: Tensor
    origin_index: np.ndarray
    branch: str

    def __post_init__(self):
        if self.tokens.ndim != 3:
            raise ShapeError(f"TokenBatch tokens must be [batch, rows, dim], got {self.tokens.shape}")
        if self.origin_index.shape != self.tokens.shape[:2]:
            raise ShapeError(
                f"origin_index {self.origin_index.shape} does not match tokens {self.tokens.shape}")

    @property
    def rows(self) -> int:
        return self.tokens.shape[1]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    def with_tokens(self, tokens: Tensor) -> "TokenBatch":
        return TokenBatch(tokens, self.origin_index, self.branch)


def extract_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, C, H, W] -> [B, (H/patch)*(W/patch), C*patch*patch], row-major grid.

    Each patch row flattens as (channel, y, x). Image extent must be an exact
    multiple of the patch side.
    """
    images = np.asarray(images)
    if images.ndim != 4:
        raise ShapeError(f"extract_patches needs [B, C, H, W], got {images.shape}")
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise ShapeError(f"image extent {h}x{w} is not a multiple of patch {patch}")
    gy, gx = h // patch, w // patch
    tiles = images.reshape(b, c, gy, patch, gx, patch)
    return np.ascontiguousarray(tiles.transpose(0, 2, 4, 1, 3, 5)).reshape(b, gy * gx, c * patch * patch)


class PatchEmbedder:
    """Linear patch projection plus class token and learned positions."""

    def __init__(self, side: int, patch: int, dim: int, branch: str,
                 rng: np.random.Generator, dtype=np.float32, channels: int = 3):
        if side % patch:
            raise ShapeError(f"side {side} is not a multiple of patch {patch}")
        self.side = side
        self.patch = patch
        self.dim = dim
        self.branch = branch
        self.channels = channels
        self.num_patches = (side // patch) ** 2
        self.params = {
            "proj.w": Tensor(trunc_normal(rng, (channels * patch * patch, dim), dtype=dtype),
                             trainable=True),
            "proj.b": Tensor(np.zeros(dim, dtype=dtype), trainable=True),
            # Class token starts at zero; positions follow the projection init.
            "cls": Tensor(np.zeros((1, dim), dtype=dtype), trainable=True),
            "pos": Tensor(trunc_normal(rng, (self.num_patches + 1, dim), dtype=dtype),
                          trainable=True),
        }

    def embed(self, images: np.ndarray, record=None) -> TokenBatch:
        """[B, C, side, side] float array in [0, 1] -> TokenBatch with N+1 rows."""
        if images.ndim != 4 or images.shape[1] != self.channels:
            raise ShapeError(f"embed expects [B, {self.channels}, H, W], got {images.shape}")
        if images.shape[2] != self.side or images.shape[3] != self.side:
            raise ShapeError(
                f"{self.branch} branch expects {self.side}x{self.side} images, "
                f"got {images.shape[2]}x{images.shape[3]}")
        p = self.params
        dtype = p["proj.w"].dtype
        flat = Tensor(extract_patches(images, self.patch).astype(dtype))
        tokens = add(matmul(flat, p["proj.w"]), p["proj.b"])  # [B, N, dim]
        b = images.shape[0]
        # Broadcast the shared class token onto a zero base so its gradient
        # sums over the batch like any other trailing-shape add.
        cls_tok = add(Tensor(np.zeros((b, 1, self.dim), dtype=dtype)), p["cls"])
        seq = concat_rows([cls_tok, tokens])
        seq = add(seq, p["pos"])
        origin = np.broadcast_to(np.arange(seq.shape[1], dtype=np.int64), seq.shape[:2]).copy()
        out = TokenBatch(seq, origin, self.branch)
        if record is not None:
            record.add_features(self.branch, record.next_stage(self.branch), "embed", seq.data)
        return out


def mhsa(x: Tensor, params: dict, heads: int, record=None, record_key=None) -> Tensor:
    """Multi-head self-attention over [B, T, d] with per-head 1/sqrt(d/heads) scaling."""
    if x.ndim != 3:
        raise ShapeError(f"mhsa expects [B, T, d], got {x.shape}")
    d = x.shape[-1]
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    q = split_heads(add(matmul(x, params["wq"]), params["bq"]), heads)
    k = split_heads(add(matmul(x, params["wk"]), params["bk"]), heads)
    v = split_heads(add(matmul(x, params["wv"]), params["bv"]), heads)
    logits = scale(matmul(q, transpose(k)), (d // heads) ** -0.5)
    attn = softmax_rows(logits)  # [B, S, T, T]
    if record is not None and record_key is not None:
        branch, stage = record_key
        record.add_attention(branch, stage, "mhsa", attn.data.mean(axis=1))
    out = merge_heads(matmul(attn, v))
    return add(matmul(out, params["wo"]), params["bo"])


class EncoderBlock:
    """Pre-norm transformer block: MHSA residual then 4x GELU MLP residual."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 mlp_ratio: int = 4, dtype=np.float32):
        if dim % heads:
            raise ShapeError(f"width {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        hidden = dim * mlp_ratio

        def w(*shape):
            return Tensor(trunc_normal(rng, shape, dtype=dtype), trainable=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape, dtype=dtype), trainable=True)

        self.params = {
            "ln1.g": Tensor(np.ones(dim, dtype=dtype), trainable=True),
            "ln1.b": zeros(dim),
            "wq": w(dim, dim), "bq": zeros(dim),
            "wk": w(dim, dim), "bk": zeros(dim),
            "wv": w(dim, dim), "bv": zeros(dim),
            "wo": w(dim, dim), "bo": zeros(dim),
            "ln2.g": Tensor(np.ones(dim, dtype=dtype), trainable=True),
            "ln2.b": zeros(dim),
            "mlp.w1": w(dim, hidden), "mlp.b1": zeros(hidden),
            "mlp.w2": w(hidden, dim), "mlp.b2": zeros(dim),
        }

    def __call__(self, x: Tensor, record=None, record_key=None) -> Tensor:
        p = self.params
        normed = layer_norm(x, p["ln1.g"], p["ln1.b"])
        x = add(x, mhsa(normed, p, self.heads, record=record, record_key=record_key))
        normed = layer_norm(x, p["ln2.g"], p["ln2.b"])
        hidden = gelu(add(matmul(normed, p["mlp.w1"]), p["mlp.b1"]))
        return add(x, add(matmul(hidden, p["mlp.w2"]), p["mlp.b2"]))


def encoder_stack(batch: TokenBatch, blocks, record=None) -> TokenBatch:
    """Run `blocks` in order over a TokenBatch, recording per-block features."""
    x = batch.tokens
    for block in blocks:
        key = None
        if record is not None:
            key = (batch.branch, record.next_stage(batch.branch))
        x = block(x, record=record, record_key=key)
        if record is not None:
            record.add_features(batch.branch, key[1], "block", x.data)
    return batch.with_tokens(x)
