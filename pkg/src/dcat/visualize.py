"""Diagnostic artifacts: keep-mask bitmaps, attention overlays, CKA curves.

Everything here is a pure function of (model weights, samples): rendering a
mask or overlay runs one recorded forward pass and maps token-level results
back onto the pixel grid with nearest-neighbor patch upsampling, so each
pixel's value is attributable to exactly one token.
"""

from __future__ import annotations

import os

import numpy as np

from .model import DcatModel, linear_cka
from .netpbm import write_pgm, write_ppm
from .record import AttentionRecord
from .synth import DataError, Dataset, batch_views

__all__ = [
    "ranking_rounds",
    "keep_mask_image",
    "attention_overlay",
    "class_attention_heat",
    "keep_box_overlap",
    "cka_rows",
    "format_cka_csv",
    "inspect_outputs",
]


def ranking_rounds(record: AttentionRecord, branch: str) -> list:
    """Per-round ranking output for one branch, in forward order.

    Returns [(kept [B, k], scores [B, N]), ...]; empty when the model has no
    ranking stage (class-only fusion, ranking disabled, or no fusion at all).
    """
    keys = sorted(k for k in record.kept if k[0] == branch and k[2] == "ranking")
    return [(record.kept[k], record.attention[k]) for k in keys]


def _grid_side(num_patches: int) -> int:
    side = int(round(num_patches ** 0.5))
    if side * side != num_patches:
        raise ValueError(f"{num_patches} patches do not form a square grid")
    return side


def keep_mask_image(kept_row: np.ndarray, num_patches: int, patch: int) -> np.ndarray:
    """[k] kept patch ids -> uint8 bitmap at image resolution (255 kept, 0 dropped)."""
    grid = _grid_side(num_patches)
    flat = np.zeros(num_patches, dtype=np.uint8)
    flat[np.asarray(kept_row, dtype=np.int64)] = 255
    return np.repeat(np.repeat(flat.reshape(grid, grid), patch, axis=0),
                     patch, axis=1)


def attention_overlay(image: np.ndarray, scores: np.ndarray, patch: int) -> np.ndarray:
    """Paint per-patch attention into the red channel over the grayscale image.

    image is the model input as uint8 [3, H, W]; scores is [N] over the patch
    grid. Scores are scaled so the strongest patch reaches full red; pixels
    keep their gray value wherever attention is weaker.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"overlay expects [3, H, W] u8 image, got {image.shape}")
    luma = np.rint(0.299 * image[0] + 0.587 * image[1]
                   + 0.114 * image[2]).astype(np.uint8)
    scores = np.asarray(scores, dtype=np.float64)
    grid = _grid_side(scores.size)
    peak = scores.max()
    scaled = scores / peak if peak > 0 else np.zeros_like(scores)
    heat = np.rint(scaled * 255.0).astype(np.uint8).reshape(grid, grid)
    heat = np.repeat(np.repeat(heat, patch, axis=0), patch, axis=1)
    if heat.shape != luma.shape:
        raise ValueError(f"{scores.size} patches of {patch}px do not tile "
                         f"a {luma.shape} image")
    out = np.stack([np.maximum(luma, heat), luma, luma])
    return out


def class_attention_heat(record: AttentionRecord, branch: str) -> np.ndarray | None:
    """[B, N] patch heat for one branch: ranking scores when the model ranks,
    otherwise the class row of the last self-attention map (class column
    dropped, remainder renormalized). None when the branch recorded nothing.
    """
    rounds = ranking_rounds(record, branch)
    if rounds:
        return rounds[0][1]
    keys = sorted(k for k in record.attention if k[0] == branch and k[2] == "mhsa")
    if not keys:
        return None
    cls_row = record.attention[keys[-1]][:, 0, 1:]
    total = cls_row.sum(axis=-1, keepdims=True)
    total[total == 0.0] = 1.0
    return cls_row / total


def keep_box_overlap(model: DcatModel, dataset: Dataset, n: int = 100,
                     round_index: int = 0, batch_size: int = 50) -> float:
    """Mean fraction of each true box's area covered by kept global patches.

    Uses the ranking output of fusion round `round_index`. A uniformly random
    keep set of ceil(alpha*N) patches covers alpha of any fixed region in
    expectation, so alpha is the chance baseline for this number.
    """
    c = model.config
    n = min(n, len(dataset))
    if n == 0:
        raise DataError("dataset is empty")
    patch = c.patch_global
    gx = c.global_side // patch
    vals = []
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        g, m, _ = batch_views(dataset, idx, c.mip_side, dtype=c.np_dtype)
        record = AttentionRecord()
        model.forward(g, m, record=record)
        rounds = ranking_rounds(record, "global")
        if not rounds:
            raise ValueError("model has no global ranking stage to measure")
        kept = rounds[round_index][0]
        for row, i in enumerate(idx):
            x, y, w, h = (int(v) for v in dataset.boxes[i])
            covered = 0
            for p in kept[row]:
                px = (int(p) % gx) * patch
                py = (int(p) // gx) * patch
                ix = max(0, min(x + w, px + patch) - max(x, px))
                iy = max(0, min(y + h, py + patch) - max(y, py))
                covered += ix * iy
            vals.append(covered / float(w * h))
    return float(np.mean(vals))


def cka_rows(model: DcatModel, dataset: Dataset, n: int = 256,
             batch_size: int = 64) -> list:
    """(layer, branch, CKA vs that branch's final class token) per snapshot.

    Token features of every recorded stage (embedding, each encoder block,
    each fusion round) are flattened per sample and compared against the
    branch's final class-token features over up to n held-out samples.
    """
    n = min(n, len(dataset))
    if n == 0:
        raise DataError("dataset is empty")
    c = model.config
    collected: dict = {}
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        g, m, _ = batch_views(dataset, idx, c.mip_side, dtype=c.np_dtype)
        record = AttentionRecord()
        model.forward(g, m, record=record)
        for branch in ("global", "mip"):
            for key, tokens in record.branch_features(branch):
                collected.setdefault(key, []).append(tokens)
    rows = []
    for branch in ("global", "mip"):
        keys = sorted(k for k in collected if k[0] == branch)
        if not keys:
            continue
        stacked = [np.concatenate(collected[k], axis=0) for k in keys]
        final_cls = stacked[-1][:, 0, :]
        for layer, feats in enumerate(stacked):
            flat = feats.reshape(feats.shape[0], -1)
            rows.append((layer, branch, linear_cka(flat, final_cls)))
    return rows


def format_cka_csv(rows) -> str:
    lines = ["layer,branch,cka"]
    for layer, branch, value in rows:
        lines.append(f"{layer},{branch},{float(value)!r}")
    return "\n".join(lines) + "\n"


def inspect_outputs(model: DcatModel, dataset: Dataset, sample: int,
                    out_dir: str, cka_n: int = 256) -> list:
    """Write every inspection artifact for one sample; returns written paths.

    Keep-mask PGM per branch per fusion round, class-attention overlay PPM
    per branch (dims equal the branch input dims), and the per-layer CKA CSV
    computed over up to cka_n samples of the dataset.
    """
    if not 0 <= sample < len(dataset):
        raise DataError(f"sample index {sample} outside dataset of {len(dataset)}")
    c = model.config
    os.makedirs(out_dir, exist_ok=True)
    g, m, _ = batch_views(dataset, np.array([sample]), c.mip_side,
                          dtype=c.np_dtype)
    record = AttentionRecord()
    model.forward(g, m, record=record)

    views = {"global": (g, c.patch_global), "mip": (m, c.patch_mip)}
    written = []
    for branch, (images, patch) in views.items():
        num_patches = (images.shape[-1] // patch) ** 2
        for r, (kept, _) in enumerate(ranking_rounds(record, branch)):
            path = os.path.join(out_dir, f"keep_{branch}_r{r}.pgm")
            write_pgm(path, keep_mask_image(kept[0], num_patches, patch))
            written.append(path)
        heat = class_attention_heat(record, branch)
        if heat is not None:
            u8 = np.rint(np.asarray(images[0], dtype=np.float64) * 255.0
                         ).astype(np.uint8)
            path = os.path.join(out_dir, f"attention_{branch}.ppm")
            write_ppm(path, attention_overlay(u8, heat[0], patch))
            written.append(path)

    path = os.path.join(out_dir, "cka.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_cka_csv(cka_rows(model, dataset, n=cka_n)))
    written.append(path)
    return written
