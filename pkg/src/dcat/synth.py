"""Synthetic dual-view classification task with known Bayes rates.

Each image contains a set of small dark boxes ("faces") on a noisy background.
One box is designated: its glyph carries the fine-grained class signal, and a
tinted ring drawn around every box carries the scene-level class signal. The
two signals are each correct only with a configured probability, and corruption
is mutually exclusive, so a frame bit inside the designated box (present iff
the scene signal is corrupted) lets a model that sees both views resolve every
sample. Boxes are content-exchangeable by construction: every image shows the
full (glyph, frame) alphabet, so the global view alone carries no information
about the designated box's content, and the exact Bayes accuracies of the
scene view, the crop view, and the pair are p_scene, p_mip, and 1.0.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .configio import ConfigError, apply_kv, parse_kv_text, render_kv
from .netpbm import read_ppm, write_ppm

BOX = 8         # designated/distractor box side, px (manifest w = h = BOX)
RING = 2        # tinted ring width around each box, px
CELL = BOX + 2 * RING

# interior/stroke/frame luminances chosen to survive quantization and noise
_BOX_FILL = 0.15
_GLYPH_BRIGHT = 0.85
_FRAME_BRIGHT = 0.95
_BG_GRAY = 0.45

# motif styles: additive RGB tints applied to the ring pixels
_MOTIF_TINTS = {
    "ember": (0.30, -0.05, -0.20),
    "moss": (-0.15, 0.25, -0.15),
    "tide": (-0.20, -0.05, 0.30),
    "sand": (0.20, 0.15, -0.25),
    "plum": (0.15, -0.20, 0.20),
}


def _glyph_stencil(name: str) -> np.ndarray:
    """BOX x BOX boolean stroke mask for a named glyph."""
    i, j = np.mgrid[0:BOX, 0:BOX]
    if name == "plus":
        mid = BOX // 2
        return (np.abs(i - mid + 0.5) < 1.5) | (np.abs(j - mid + 0.5) < 1.5)
    if name == "ex":
        return (np.abs(i - j) <= 1) | (np.abs(i + j - (BOX - 1)) <= 1)
    if name == "spot":
        c = (BOX - 1) / 2.0
        return (i - c) ** 2 + (j - c) ** 2 <= (BOX / 3.2) ** 2
    if name == "bar":
        mid = BOX // 2
        return np.abs(i - mid + 0.5) < 1.5
    if name == "hollow":
        edge = (i < 2) | (i >= BOX - 2) | (j < 2) | (j >= BOX - 2)
        return edge
    raise ConfigError(f"unknown glyph style '{name}'")


@dataclass
class SynthSpec:
    """Parameters of the generator; parseable from key=value text."""

    num_classes: int = 3
    side: int = 96
    p_scene: float = 0.8
    p_mip: float = 0.75
    noise: float = 0.05
    distractors_lo: int = 5
    distractors_hi: int = 6
    scene_motifs: str = "ember,moss,tide"
    glyphs: str = "plus,ex,spot"
    seed: int = 0

    def __post_init__(self) -> None:
        k = self.num_classes
        if k < 2:
            raise ConfigError("num_classes must be >= 2")
        if not 0.0 < self.p_scene <= 1.0 or not 0.0 < self.p_mip <= 1.0:
            raise ConfigError("p_scene and p_mip must lie in (0, 1]")
        if self.p_scene + self.p_mip < 1.0:
            raise ConfigError(
                "p_scene + p_mip must be >= 1 (corruption states are mutually "
                "exclusive)")
        # keeps 'predict the glyph' Bayes-optimal for the crop view, so the
        # crop-alone rate is exactly p_mip by construction
        if (k - 1) * (self.p_scene + self.p_mip - 1) < (1.0 - self.p_mip) - 1e-12:
            raise ConfigError(
                "informativeness too low: need (k-1)*(p_scene+p_mip-1) >= 1-p_mip")
        if self.noise < 0 or self.noise > 0.25:
            raise ConfigError("noise must lie in [0, 0.25]")
        motifs = self.motif_names()
        glyphs = self.glyph_names()
        if len(motifs) != k or len(glyphs) != k:
            raise ConfigError(
                f"scene_motifs and glyphs must list exactly {k} styles")
        for m in motifs:
            if m not in _MOTIF_TINTS:
                raise ConfigError(f"unknown scene motif '{m}'")
        for g in glyphs:
            _glyph_stencil(g)
        if len(set(motifs)) != k or len(set(glyphs)) != k:
            raise ConfigError("motif and glyph styles must be distinct")
        if self.distractors_lo < 2 * k - 1:
            raise ConfigError(
                f"distractors_lo must be >= {2 * k - 1} so every image carries "
                "the full (glyph, frame) alphabet")
        if self.distractors_hi < self.distractors_lo:
            raise ConfigError("distractors_hi must be >= distractors_lo")
        grid = self.side // CELL
        if grid * grid < 1 + self.distractors_hi:
            raise ConfigError(
                f"side {self.side} fits {grid * grid} boxes of cell {CELL}; "
                f"need {1 + self.distractors_hi}")

    def motif_names(self) -> list[str]:
        return [s.strip() for s in self.scene_motifs.split(",") if s.strip()]

    def glyph_names(self) -> list[str]:
        return [s.strip() for s in self.glyphs.split(",") if s.strip()]


@dataclass
class DualSample:
    """One generated sample: global image plus designated-box metadata."""

    global_image: np.ndarray    # [3, side, side] float in [0, 1]
    mip_box: tuple[int, int, int, int]   # x, y, w, h in global pixels
    label: int
    sample_id: str

    def __post_init__(self) -> None:
        x, y, w, h = self.mip_box
        _, ih, iw = self.global_image.shape
        if w < 8 or h < 8:
            raise ValueError(f"mip_box {self.mip_box}: w and h must be >= 8")
        if x < 0 or y < 0 or x + w > iw or y + h > ih:
            raise ValueError(f"mip_box {self.mip_box} not inside {iw}x{ih} image")


@dataclass
class SampleTrace:
    """Latent state behind one sample; test/diagnostic use only."""

    label: int
    state: str            # "none" | "scene" | "glyph"
    scene_signal: int     # motif class drawn on every ring
    glyph_signal: int     # glyph class in the designated box
    frame: int            # 1 iff the scene signal is corrupted
    symbols: list[tuple[int, int]]   # (glyph, frame) per box; index 0 = real
    cells: list[tuple[int, int]]     # grid cell (cx, cy) per box
    offset: tuple[int, int]          # global grid offset (ox, oy)


@dataclass
class BayesRates:
    """Exact optimal accuracies of each view of the generative process."""

    scene: float
    mip: float
    dual: float


def _state_weights(spec: SynthSpec) -> dict[str, Fraction]:
    ps, pm = Fraction(spec.p_scene), Fraction(spec.p_mip)
    return {"none": ps + pm - 1, "scene": 1 - ps, "glyph": 1 - pm}


def bayes_rates(spec: SynthSpec) -> BayesRates:
    """Enumerate the posterior of the generative process exactly.

    The global view is summarized by the scene signal alone: the box multiset
    is constant across samples (full alphabet plus independent uniform extras)
    and box positions are exchangeable, so it is independent of the label.
    The crop view sees (glyph signal, frame bit); the dual view sees all three.
    """
    k = spec.num_classes
    weights = _state_weights(spec)
    third = Fraction(1, k)
    scene_post: dict[int, dict[int, Fraction]] = {}
    crop_post: dict[tuple[int, int], dict[int, Fraction]] = {}
    dual_post: dict[tuple[int, int, int], dict[int, Fraction]] = {}
    for y in range(k):
        for state, w in weights.items():
            if w == 0:
                continue
            svals = [(y, Fraction(1))] if state != "scene" else [
                (v, Fraction(1, k - 1)) for v in range(k) if v != y]
            mvals = [(y, Fraction(1))] if state != "glyph" else [
                (v, Fraction(1, k - 1)) for v in range(k) if v != y]
            c = 1 if state == "scene" else 0
            for s, ps in svals:
                for m, pm in mvals:
                    p = third * w * ps * pm
                    scene_post.setdefault(s, {}).setdefault(y, Fraction(0))
                    scene_post[s][y] += p
                    crop_post.setdefault((m, c), {}).setdefault(y, Fraction(0))
                    crop_post[(m, c)][y] += p
                    dual_post.setdefault((s, m, c), {}).setdefault(y, Fraction(0))
                    dual_post[(s, m, c)][y] += p

    def acc(table: dict) -> Fraction:
        return sum((max(dist.values()) for dist in table.values()), Fraction(0))

    return BayesRates(scene=float(acc(scene_post)), mip=float(acc(crop_post)),
                      dual=float(acc(dual_post)))


def _draw_trace(spec: SynthSpec, rng: np.random.Generator) -> SampleTrace:
    k = spec.num_classes
    y = int(rng.integers(k))
    u = rng.random()
    w = _state_weights(spec)
    if u < float(w["scene"]):
        state = "scene"
    elif u < float(w["scene"]) + float(w["glyph"]):
        state = "glyph"
    else:
        state = "none"
    s = m = y
    if state == "scene":
        s = (y + 1 + int(rng.integers(k - 1))) % k
    if state == "glyph":
        m = (y + 1 + int(rng.integers(k - 1))) % k
    c = 1 if state == "scene" else 0

    alphabet = [(g, f) for g in range(k) for f in (0, 1)]
    real = (m, c)
    complement = [sym for sym in alphabet if sym != real]
    n_d = int(rng.integers(spec.distractors_lo, spec.distractors_hi + 1))
    extras = [alphabet[int(rng.integers(2 * k))] for _ in range(n_d - (2 * k - 1))]
    symbols = [real] + complement + extras

    grid = spec.side // CELL
    order = rng.permutation(grid * grid)[: len(symbols)]
    cells = [(int(c_ % grid), int(c_ // grid)) for c_ in order]
    margin = spec.side - grid * CELL
    ox = int(rng.integers(margin + 1))
    oy = int(rng.integers(margin + 1))
    return SampleTrace(label=y, state=state, scene_signal=s, glyph_signal=m,
                       frame=c, symbols=symbols, cells=cells, offset=(ox, oy))


def _render(spec: SynthSpec, trace: SampleTrace,
            rng: np.random.Generator) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    side = spec.side
    img = np.full((3, side, side), _BG_GRAY, dtype=np.float64)
    tint = np.array(_MOTIF_TINTS[spec.motif_names()[trace.scene_signal]])
    stencils = [_glyph_stencil(g) for g in spec.glyph_names()]
    ox, oy = trace.offset
    box_xy = None
    for idx, ((cx, cy), (g, f)) in enumerate(zip(trace.cells, trace.symbols)):
        x0, y0 = ox + cx * CELL, oy + cy * CELL
        cell = img[:, y0:y0 + CELL, x0:x0 + CELL]
        cell += tint[:, None, None]
        bx, by = x0 + RING, y0 + RING
        box = img[:, by:by + BOX, bx:bx + BOX]
        box[:] = _BOX_FILL
        box[:, stencils[g]] = _GLYPH_BRIGHT
        if f:
            edge = np.zeros((BOX, BOX), dtype=bool)
            edge[0, :] = edge[-1, :] = edge[:, 0] = edge[:, -1] = True
            box[:, edge] = _FRAME_BRIGHT
        if idx == 0:
            box_xy = (bx, by)
    img += rng.normal(0.0, spec.noise, size=img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    # quantize now so the in-memory sample equals its PPM round trip bitwise
    quant = np.rint(img * 255.0).astype(np.uint8)
    assert box_xy is not None
    return quant, (box_xy[0], box_xy[1], BOX, BOX)


def generate_dataset(spec: SynthSpec, n: int, out_dir: str | None = None,
                     return_trace: bool = False):
    """Generate n samples; optionally write PPM files plus a TSV manifest.

    Returns a list of DualSample (and the latent traces when asked). Output
    is deterministic under spec.seed, and sample i does not depend on n.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    streams = np.random.SeedSequence(spec.seed).spawn(n)
    samples: list[DualSample] = []
    traces: list[SampleTrace] = []
    rows: list[str] = []
    img_dir = None
    if out_dir is not None:
        img_dir = os.path.join(out_dir, "images")
        os.makedirs(img_dir, exist_ok=True)
    for i in range(n):
        rng = np.random.Generator(np.random.PCG64(streams[i]))
        trace = _draw_trace(spec, rng)
        quant, box = _render(spec, trace, rng)
        sid = f"{i:06d}"
        sample = DualSample(global_image=quant.astype(np.float32) / 255.0,
                            mip_box=box, label=trace.label, sample_id=sid)
        samples.append(sample)
        if return_trace:
            traces.append(trace)
        if out_dir is not None:
            rel = os.path.join("images", f"{sid}.ppm")
            write_ppm(os.path.join(out_dir, rel), quant)
            rows.append(f"{sid}\t{rel}\t{box[0]}\t{box[1]}\t{box[2]}\t{box[3]}"
                        f"\t{trace.label}")
    if out_dir is not None:
        manifest = "id\tpath\tx\ty\tw\th\tlabel\n" + "\n".join(rows) + "\n"
        with open(os.path.join(out_dir, "manifest.tsv"), "w", encoding="utf-8",
                  newline="\n") as fh:
            fh.write(manifest)
        with open(os.path.join(out_dir, "spec.cfg"), "w", encoding="utf-8",
                  newline="\n") as fh:
            fh.write(render_kv(spec))
    if return_trace:
        return samples, traces
    return samples


def load_spec(path: str) -> SynthSpec:
    """Parse a SynthSpec from a key=value file; unknown keys are errors."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        pairs = parse_kv_text(text)
        consumed: set = set()
        spec = apply_kv(SynthSpec, pairs, consumed)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    stray = sorted(set(pairs) - consumed)
    if stray:
        raise ConfigError(f"{path}: unknown keys: {', '.join(stray)}")
    return spec


class DataError(Exception):
    """A dataset directory, manifest, or sample failed validation."""


@dataclass
class Dataset:
    """Loaded dataset: u8 images plus per-sample box and label arrays."""

    images: np.ndarray          # [n, 3, side, side] uint8
    boxes: np.ndarray           # [n, 4] int64 (x, y, w, h)
    labels: np.ndarray          # [n] int64
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def side(self) -> int:
        return int(self.images.shape[2])

    def sample(self, i: int) -> DualSample:
        return DualSample(
            global_image=self.images[i].astype(np.float32) / 255.0,
            mip_box=tuple(int(v) for v in self.boxes[i]),
            label=int(self.labels[i]), sample_id=self.ids[i])


def samples_to_dataset(samples: list[DualSample]) -> Dataset:
    images = np.stack([np.rint(s.global_image * 255.0).astype(np.uint8)
                       for s in samples])
    boxes = np.array([s.mip_box for s in samples], dtype=np.int64)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return Dataset(images=images, boxes=boxes, labels=labels,
                   ids=[s.sample_id for s in samples])


def load_dataset(root: str) -> Dataset:
    """Read a generated dataset directory (manifest.tsv plus PPM images)."""
    manifest = os.path.join(root, "manifest.tsv")
    if not os.path.isfile(manifest):
        raise DataError(f"{root}: no manifest.tsv")
    with open(manifest, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0].split("\t")[0] != "id":
        raise DataError(f"{manifest}: missing header row")
    images, boxes, labels, ids = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        cols = line.split("\t")
        if len(cols) != 7:
            raise DataError(f"{manifest}:{lineno}: expected 7 columns, "
                            f"got {len(cols)}")
        sid, rel = cols[0], cols[1]
        try:
            x, y, w, h = (int(v) for v in cols[2:6])
            label = int(cols[6])
        except ValueError as exc:
            raise DataError(f"{manifest}:{lineno}: {exc}") from None
        path = os.path.join(root, rel)
        if not os.path.isfile(path):
            raise DataError(f"{manifest}:{lineno}: missing image {rel}")
        img = read_ppm(path)
        ih, iw = img.shape[1], img.shape[2]
        if w < 8 or h < 8 or x < 0 or y < 0 or x + w > iw or y + h > ih:
            raise DataError(f"{manifest}:{lineno}: box ({x},{y},{w},{h}) "
                            f"invalid for {iw}x{ih} image")
        images.append(img)
        boxes.append((x, y, w, h))
        labels.append(label)
        ids.append(sid)
    if not images:
        raise DataError(f"{manifest}: no samples")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataError(f"{manifest}: images disagree on shape: {sorted(shapes)}")
    return Dataset(images=np.stack(images), boxes=np.array(boxes, dtype=np.int64),
                   labels=np.array(labels, dtype=np.int64), ids=ids)


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize [C, H, W] with bilinear interpolation (half-pixel centers)."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    dt = image.dtype.type if image.dtype in (np.float32, np.float64) else np.float64
    src = image.astype(dt, copy=False)

    def axis_coords(n_out: int, n_in: int):
        scale = dt(n_in) / dt(n_out)
        x = (np.arange(n_out, dtype=dt) + dt(0.5)) * scale - dt(0.5)
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (x - lo).astype(dt)

    y0, y1, fy = axis_coords(out_h, h)
    x0, x1, fx = axis_coords(out_w, w)
    fx = fx[None, None, :]
    fy = fy[None, :, None]
    top = src[:, y0][:, :, x0] * (1 - fx) + src[:, y0][:, :, x1] * fx
    bot = src[:, y1][:, :, x0] * (1 - fx) + src[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def crop_mip(image: np.ndarray, box: tuple[int, int, int, int],
             mip_side: int) -> np.ndarray:
    """Cut the designated box from [C, H, W] and resize it to mip_side."""
    x, y, w, h = box
    _, ih, iw = image.shape
    if w < 1 or h < 1 or x < 0 or y < 0 or x + w > iw or y + h > ih:
        raise DataError(f"box ({x},{y},{w},{h}) outside {iw}x{ih} image")
    return bilinear_resize(image[:, y:y + h, x:x + w], mip_side, mip_side)


def batch_views(dataset: Dataset, indices: np.ndarray, mip_side: int,
                dtype=np.float32, flip: np.ndarray | None = None):
    """Assemble (global, mip, labels) arrays for a batch of sample indices.

    flip, when given, is a boolean mask: flipped samples are mirrored
    horizontally (both views stay consistent because the crop is taken after
    the flip, with the box reflected).
    """
    gs, ms, ys = [], [], []
    for j, i in enumerate(indices):
        img = dataset.images[int(i)].astype(dtype) / dtype(255.0)
        x, y, w, h = (int(v) for v in dataset.boxes[int(i)])
        if flip is not None and bool(flip[j]):
            img = img[:, :, ::-1].copy()
            x = dataset.side - x - w
        gs.append(img)
        ms.append(crop_mip(img, (x, y, w, h), mip_side))
        ys.append(int(dataset.labels[int(i)]))
    return np.stack(gs), np.stack(ms), np.array(ys, dtype=np.int64)
