"""The dual-branch model: configuration, assembly, forward pass, checkpoints.

Two patch-token towers run side by side (a wide one over the full scene, a
narrow one over the detail crop), exchanging information through fusion
rounds; the two class tokens are merged and mapped to the output. Every
weight lives in a flat name -> Tensor dict whose insertion order is fixed by
construction, which makes checkpoints byte-stable.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from dcat.archive import load_archive, save_archive
from dcat.configio import ConfigError, apply_kv, parse_kv_text, render_kv
from dcat.cpa import CpaRound
from dcat.record import AttentionRecord
from dcat.tensor import (
    Tensor,
    add,
    concat_rows,
    cross_entropy,
    gather_rows,
    layer_norm,
    matmul,
    mse,
    reshape,
)
from dcat.vit import EncoderBlock, PatchEmbedder, encoder_stack, trunc_normal

__all__ = ["DcatConfig", "DcatModel", "linear_cka",
           "save_checkpoint", "load_checkpoint", "param_report"]

CONFIG_ENTRY = "__config__"


@dataclass
class DcatConfig:
    """Architecture and ablation switches.

    Defaults are the desk-scale setup: it trains on a laptop CPU in minutes.
    The ablation toggles compose: `dual_input=False` runs `single_branch`
    alone; `cpa_enabled=False` keeps both towers but never fuses them;
    `cca_mode=True` swaps patch-level fusion for class-token exchange;
    `ranking_enabled=False` forces every patch into the query set (alphas
    are pinned to 1).
    """

    num_classes: int = 3
    regression: bool = False
    global_side: int = 96
    mip_side: int = 96
    patch_global: int = 12
    patch_mip: int = 16
    d_global: int = 64
    d_mip: int = 32
    heads_global: int = 4
    heads_mip: int = 2
    depth_global: int = 6
    depth_mip: int = 1
    cpa_rounds: int = 3
    layers: int = 1
    mlp_ratio: int = 4
    alpha_global: float = 0.5
    alpha_mip: float = 0.5
    dual_input: bool = True
    cpa_enabled: bool = True
    ranking_enabled: bool = True
    cca_mode: bool = False
    single_branch: str = "global"
    head_merge: str = "concat"
    precision: str = "f32"
    seed: int = 0

    def __post_init__(self):
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.single_branch not in ("global", "mip"):
            raise ConfigError(f"single_branch must be global or mip, got {self.single_branch!r}")
        if self.head_merge not in ("concat", "sum"):
            raise ConfigError(f"head_merge must be concat or sum, got {self.head_merge!r}")
        if self.num_classes < 2 and not self.regression:
            raise ConfigError("classification needs num_classes >= 2")
        for side, patch, name in ((self.global_side, self.patch_global, "global"),
                                  (self.mip_side, self.patch_mip, "mip")):
            if side % patch:
                raise ConfigError(f"{name} side {side} is not a multiple of patch {patch}")
        for d, heads, name in ((self.d_global, self.heads_global, "global"),
                               (self.d_mip, self.heads_mip, "mip")):
            if d % heads:
                raise ConfigError(f"{name} width {d} not divisible by {heads} heads")
        if self.layers < 1 or min(self.depth_global, self.depth_mip, self.cpa_rounds) < 0:
            raise ConfigError("layers must be >= 1, depths and rounds >= 0")
        if not self.ranking_enabled:
            self.alpha_global = 1.0
            self.alpha_mip = 1.0
        for alpha, name in ((self.alpha_global, "alpha_global"), (self.alpha_mip, "alpha_mip")):
            if not 0.0 < alpha <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1], got {alpha}")
        if self.cca_mode and not (self.dual_input and self.cpa_enabled):
            raise ConfigError("cca_mode needs dual_input and cpa_enabled")

    @property
    def np_dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    @property
    def out_dim(self) -> int:
        return 1 if self.regression else self.num_classes

    def to_text(self) -> str:
        return render_kv(self)

    @classmethod
    def from_text(cls, text: str) -> "DcatConfig":
        mapping = parse_kv_text(text)
        consumed: set = set()
        cfg = apply_kv(cls, mapping, consumed)
        unknown = [k for k in mapping if k not in consumed]
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cfg


class DcatModel:
    """Weights plus the forward pass. Construction is deterministic in seed."""

    def __init__(self, config: DcatConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        dtype = config.np_dtype
        c = config
        self._params: dict = {}

        self.embed_global = self.embed_mip = None
        if c.dual_input or c.single_branch == "global":
            self.embed_global = PatchEmbedder(c.global_side, c.patch_global, c.d_global,
                                              "global", rng, dtype)
            self._register("global.embed", self.embed_global.params)
        if c.dual_input or c.single_branch == "mip":
            self.embed_mip = PatchEmbedder(c.mip_side, c.patch_mip, c.d_mip, "mip", rng, dtype)
            self._register("mip.embed", self.embed_mip.params)

        self.global_blocks, self.mip_blocks, self.rounds = [], [], []
        fusing = c.dual_input and c.cpa_enabled
        for layer in range(c.layers):
            if self.embed_global is not None:
                blocks = [EncoderBlock(c.d_global, c.heads_global, rng,
                                       mlp_ratio=c.mlp_ratio, dtype=dtype)
                          for _ in range(c.depth_global)]
                for i, blk in enumerate(blocks):
                    self._register(f"global.l{layer}.b{i}", blk.params)
                self.global_blocks.append(blocks)
            if self.embed_mip is not None:
                blocks = [EncoderBlock(c.d_mip, c.heads_mip, rng,
                                       mlp_ratio=c.mlp_ratio, dtype=dtype)
                          for _ in range(c.depth_mip)]
                for i, blk in enumerate(blocks):
                    self._register(f"mip.l{layer}.b{i}", blk.params)
                self.mip_blocks.append(blocks)
            if fusing:
                rounds = [CpaRound(c.d_global, c.d_mip, c.heads_global, c.heads_mip, rng,
                                   dtype=dtype, mode="cca" if c.cca_mode else "cpa",
                                   ranked=c.ranking_enabled)
                          for _ in range(c.cpa_rounds)]
                for i, rnd in enumerate(rounds):
                    self._register(f"fuse.l{layer}.r{i}", rnd.params)
                self.rounds.append(rounds)

        if not c.dual_input:
            head_in = c.d_global if c.single_branch == "global" else c.d_mip
        elif c.head_merge == "concat":
            head_in = c.d_global + c.d_mip
        else:
            head_in = c.d_global
            self._params["head.up.w"] = Tensor(_trunc(rng, (c.d_mip, c.d_global), dtype),
                                               trainable=True)
            self._params["head.up.b"] = Tensor(np.zeros(c.d_global, dtype=dtype), trainable=True)
        self._params["head.ln.g"] = Tensor(np.ones(head_in, dtype=dtype), trainable=True)
        self._params["head.ln.b"] = Tensor(np.zeros(head_in, dtype=dtype), trainable=True)
        self._params["head.w"] = Tensor(_trunc(rng, (head_in, c.out_dim), dtype), trainable=True)
        self._params["head.b"] = Tensor(np.zeros(c.out_dim, dtype=dtype), trainable=True)

    def _register(self, prefix: str, params: dict) -> None:
        for key, tensor in params.items():
            self._params[f"{prefix}.{key}"] = tensor

    def parameters(self) -> dict:
        return self._params

    # ------------------------------------------------------------------
    # Forward

    def _check_inputs(self, global_images, mip_images) -> tuple:
        c = self.config
        out = []
        for name, arr, side, needed in (
                ("global", global_images, c.global_side, self.embed_global is not None),
                ("mip", mip_images, c.mip_side, self.embed_mip is not None)):
            if not needed:
                out.append(None)
                continue
            if arr is None:
                raise ValueError(f"{name} branch is active but received no images")
            arr = np.asarray(arr, dtype=c.np_dtype)
            if arr.ndim != 4 or arr.shape[1] != 3 or arr.shape[2] != side or arr.shape[3] != side:
                raise ValueError(
                    f"{name} images must be [batch, 3, {side}, {side}], got {arr.shape}")
            out.append(arr)
        g, m = out
        if g is not None and m is not None and g.shape[0] != m.shape[0]:
            raise ValueError(f"branch batch sizes disagree: {g.shape[0]} vs {m.shape[0]}")
        return g, m

    def forward(self, global_images=None, mip_images=None,
                record: AttentionRecord | None = None) -> Tensor:
        """Logits [batch, num_classes] (or [batch, 1] scores in regression)."""
        c = self.config
        g_imgs, m_imgs = self._check_inputs(global_images, mip_images)
        g = self.embed_global.embed(g_imgs, record) if self.embed_global is not None else None
        m = self.embed_mip.embed(m_imgs, record) if self.embed_mip is not None else None

        for layer in range(c.layers):
            if g is not None:
                g = encoder_stack(g, self.global_blocks[layer], record)
            if m is not None:
                m = encoder_stack(m, self.mip_blocks[layer], record)
            if self.rounds:
                for rnd in self.rounds[layer]:
                    g, m = rnd(g, m, c.alpha_global, c.alpha_mip, record)

        feats = []
        for tb in (g, m):
            if tb is not None:
                cls_rows = gather_cls(tb.tokens)
                feats.append(cls_rows)
        if not c.dual_input:
            merged = feats[0]
        elif c.head_merge == "concat":
            # Feature-axis concat routed through the row axis: [B, d, 1]
            # columns stack along rows, then flatten back to [B, dg+dm].
            cols = [reshape(f, (f.shape[0], f.shape[1], 1)) for f in feats]
            merged = reshape(concat_rows(cols),
                             (feats[0].shape[0], feats[0].shape[1] + feats[1].shape[1]))
        else:
            lifted = add(matmul(feats[1], self._params["head.up.w"]), self._params["head.up.b"])
            merged = add(feats[0], lifted)
        normed = layer_norm(merged, self._params["head.ln.g"], self._params["head.ln.b"])
        return add(matmul(normed, self._params["head.w"]), self._params["head.b"])

    def loss(self, global_images, mip_images, labels) -> Tensor:
        logits = self.forward(global_images, mip_images)
        return self.loss_from_logits(logits, labels)

    def loss_from_logits(self, logits: Tensor, labels) -> Tensor:
        if self.config.regression:
            target = Tensor(np.asarray(labels, dtype=self.config.np_dtype).reshape(-1, 1))
            return mse(logits, target)
        return cross_entropy(logits, np.asarray(labels))

    def predict(self, global_images=None, mip_images=None) -> np.ndarray:
        logits = self.forward(global_images, mip_images).data
        if self.config.regression:
            return logits[:, 0]
        return logits.argmax(axis=1)

    def predict_proba(self, global_images=None, mip_images=None) -> np.ndarray:
        if self.config.regression:
            raise ValueError("predict_proba is undefined for a regression head")
        logits = self.forward(global_images, mip_images).data
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)


def gather_cls(tokens: Tensor) -> Tensor:
    """Row 0 of every sample as a [batch, dim] tensor."""
    rows = np.zeros((tokens.shape[0], 1), dtype=np.int64)
    picked = gather_rows(tokens, rows)
    return reshape(picked, (tokens.shape[0], tokens.shape[2]))


def _trunc(rng, shape, dtype):
    return trunc_normal(rng, shape, dtype=dtype)


# ----------------------------------------------------------------------
# Parameter accounting


def param_report(model: DcatModel) -> tuple:
    """(total trainable scalars, ordered {section: count}) for a model."""
    sections: dict = {}
    for name, tensor in model.parameters().items():
        if name.startswith(("global.embed", "mip.embed")):
            section = name.split(".embed")[0] + ".embed"
        elif name.startswith("global.l"):
            section = "global.blocks"
        elif name.startswith("mip.l"):
            section = "mip.blocks"
        elif name.startswith("fuse."):
            section = "fuse"
        else:
            section = "head"
        sections[section] = sections.get(section, 0) + tensor.size
    return sum(sections.values()), sections


# ----------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, model: DcatModel) -> None:
    """Archive every weight plus the config text under a reserved entry."""
    entries = {CONFIG_ENTRY: np.frombuffer(model.config.to_text().encode("utf-8"),
                                           dtype=np.uint8).copy()}
    for name, tensor in model.parameters().items():
        entries[name] = tensor.data
    save_archive(path, entries)


def load_checkpoint(path) -> DcatModel:
    """Rebuild a model from an archive; every entry must match exactly."""
    entries = load_archive(path)
    if CONFIG_ENTRY not in entries:
        raise ConfigError(f"checkpoint lacks the {CONFIG_ENTRY} entry")
    config = DcatConfig.from_text(bytes(entries.pop(CONFIG_ENTRY)).decode("utf-8"))
    model = DcatModel(config)
    params = model.parameters()
    missing = [n for n in params if n not in entries]
    extra = [n for n in entries if n not in params]
    if missing or extra:
        raise ConfigError(
            f"checkpoint does not match config: missing {missing or 'none'}, "
            f"unexpected {extra or 'none'}")
    for name, tensor in params.items():
        arr = entries[name]
        if arr.shape != tensor.data.shape:
            raise ConfigError(
                f"checkpoint entry {name!r} has shape {arr.shape}, expected {tensor.data.shape}")
        tensor.data = arr.astype(config.np_dtype, copy=False)
    return model


# ----------------------------------------------------------------------
# Representation similarity


def linear_cka(a: np.ndarray, b: np.ndarray) -> float:
    """Linear centered-kernel alignment between two feature matrices.

    Rows are examples, columns are features; widths may differ. Invariant to
    orthogonal maps and positive isotropic scaling of either side. Returns 0
    (with a warning) when either side has no variance.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"linear_cka needs [n, d] inputs with equal n, got {a.shape} and {b.shape}")
    a = a - a.mean(axis=0, keepdims=True)
    b = b - b.mean(axis=0, keepdims=True)
    cross = np.linalg.norm(a.T @ b, ord="fro") ** 2
    denom = (np.linalg.norm(a.T @ a, ord="fro") * np.linalg.norm(b.T @ b, ord="fro"))
    if denom == 0.0:
        warnings.warn("linear_cka saw a zero-variance feature matrix; returning 0")
        return 0.0
    return float(cross / denom)
