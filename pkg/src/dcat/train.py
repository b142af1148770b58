"""Training loop, optimizer, schedule, metrics, and the ablation suite."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .configio import ConfigError, apply_kv, parse_kv_text
from .model import DcatConfig, DcatModel, save_checkpoint
from .synth import DataError, Dataset, batch_views
from .tensor import GradTape, NumericError


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or weight update."""


@dataclass
class TrainConfig:
    epochs: int = 60
    warmup_epochs: int = 6
    batch_size: int = 32
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must satisfy 0 <= warmup < epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.base_lr < 0 or self.weight_decay < 0:
            raise ConfigError("base_lr and weight_decay must be >= 0")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")


def lr_at(tc: TrainConfig, epoch: int) -> float:
    """Linear ramp over the warmup epochs, then cosine decay toward zero."""
    if epoch < tc.warmup_epochs:
        return tc.base_lr * (epoch + 1) / tc.warmup_epochs
    span = max(1, tc.epochs - tc.warmup_epochs)
    progress = (epoch - tc.warmup_epochs) / span
    return 0.5 * tc.base_lr * (1.0 + float(np.cos(np.pi * progress)))


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Parameters whose gradient is None are skipped entirely: they receive
    neither a moment update nor decay, so untouched weights (for example the
    identity ranking projections) stay bitwise intact. Decay applies only to
    weight matrices (final name component starting with "w"); biases, norm
    gains, class tokens, and position embeddings are exempt.
    """

    def __init__(self, params: dict, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m: dict = {}
        self._v: dict = {}

    @staticmethod
    def decays(name: str) -> bool:
        return name.rsplit(".", 1)[-1].startswith("w")

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if name not in self._m:
                self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            m, v = self._m[name], self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay and self.decays(name):
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class EvalResult:
    loss: float
    metric_name: str            # "accuracy" or "mse"
    metric: float
    confusion: np.ndarray | None   # [k, k], rows = true class; None for mse
    n: int


@dataclass
class TrainResult:
    rows: list  # (epoch, split, loss, metric) tuples in emission order

    def final(self, split: str = "train"):
        for row in reversed(self.rows):
            if row[1] == split:
                return row
        raise ValueError(f"no rows for split {split!r}")


def format_metrics_csv(rows) -> str:
    lines = ["epoch,split,loss,metric"]
    for epoch, split, loss, metric in rows:
        lines.append(f"{epoch},{split},{float(loss)!r},{float(metric)!r}")
    return "\n".join(lines) + "\n"


def _check_dataset(model: DcatModel, dataset: Dataset) -> None:
    c = model.config
    if len(dataset) == 0:
        raise DataError("dataset is empty")
    if dataset.side != c.global_side:
        raise DataError(f"dataset images are {dataset.side}px but the model "
                        f"expects {c.global_side}px")
    if not c.regression:
        bad = np.flatnonzero((dataset.labels < 0) |
                             (dataset.labels >= c.num_classes))
        if bad.size:
            i = int(bad[0])
            raise DataError(f"sample {dataset.ids[i]}: label "
                            f"{int(dataset.labels[i])} outside "
                            f"[0, {c.num_classes})")


def evaluate(model: DcatModel, dataset: Dataset, batch_size: int = 128) -> EvalResult:
    """Mean loss plus accuracy/confusion (or MSE) over a dataset, in id order."""
    _check_dataset(model, dataset)
    c = model.config
    n = len(dataset)
    total = 0.0
    confusion = None
    if not c.regression:
        confusion = np.zeros((c.num_classes, c.num_classes), dtype=np.int64)
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        g, m, y = batch_views(dataset, idx, c.mip_side, dtype=c.np_dtype)
        logits = model.forward(g, m)
        total += float(model.loss_from_logits(logits, y).item()) * len(idx)
        if confusion is not None:
            preds = logits.data.argmax(axis=1)
            np.add.at(confusion, (y, preds), 1)
    loss = total / n
    if c.regression:
        return EvalResult(loss=loss, metric_name="mse", metric=loss,
                          confusion=None, n=n)
    accuracy = float(np.trace(confusion)) / n
    return EvalResult(loss=loss, metric_name="accuracy", metric=accuracy,
                      confusion=confusion, n=n)


def train(model: DcatModel, dataset: Dataset, tc: TrainConfig,
          eval_dataset: Dataset | None = None, log_path: str | None = None,
          ckpt_path: str | None = None, augment: bool = True) -> TrainResult:
    """Fit the model in place; returns per-epoch metric rows.

    Shuffling and flip augmentation derive from tc.seed, so a run is
    reproducible bit for bit in float64 single-threaded mode.
    """
    c = model.config
    if tc.precision != c.precision:
        raise ConfigError(f"train precision {tc.precision} does not match "
                          f"model precision {c.precision}")
    _check_dataset(model, dataset)
    rng = np.random.Generator(np.random.PCG64(tc.seed))
    opt = AdamW(model.parameters(), weight_decay=tc.weight_decay)
    n = len(dataset)
    rows = []
    for epoch in range(tc.epochs):
        lr = lr_at(tc, epoch)
        perm = rng.permutation(n)
        flips = (rng.random(n) < 0.5) if augment else None
        total = 0.0
        hits = 0
        try:
            for start in range(0, n, tc.batch_size):
                idx = perm[start:start + tc.batch_size]
                fl = flips[start:start + len(idx)] if flips is not None else None
                g, m, y = batch_views(dataset, idx, c.mip_side,
                                      dtype=c.np_dtype, flip=fl)
                with GradTape() as tape:
                    logits = model.forward(g, m)
                    loss = model.loss_from_logits(logits, y)
                tape.backward(loss)
                total += float(loss.item()) * len(idx)
                if not c.regression:
                    hits += int((logits.data.argmax(axis=1) == y).sum())
                opt.step(lr)
                opt.zero_grad()
        except NumericError as exc:
            raise DivergenceError(
                f"training diverged at epoch {epoch}: {exc}") from exc
        train_loss = total / n
        metric = train_loss if c.regression else hits / n
        rows.append((epoch, "train", train_loss, metric))
        if eval_dataset is not None:
            ev = evaluate(model, eval_dataset)
            rows.append((epoch, "test", ev.loss, ev.metric))
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(format_metrics_csv(rows))
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, model)
    return TrainResult(rows=rows)


def load_run_config(text: str) -> tuple[DcatConfig, TrainConfig]:
    """Split one key=value file into model and train configs.

    Keys may belong to either dataclass (seed and precision feed both); a key
    unknown to both is an error.
    """
    mapping = parse_kv_text(text)
    consumed: set = set()
    cfg = apply_kv(DcatConfig, mapping, consumed)
    tc = apply_kv(TrainConfig, mapping, consumed)
    stray = sorted(set(mapping) - consumed)
    if stray:
        raise ConfigError(f"unknown config keys: {', '.join(stray)}")
    return cfg, tc


# ----------------------------------------------------------------- ablations

SUITES = ("table5", "table6", "table7", "fig3", "all")

ALPHA_SWEEP = (0.25, 0.5, 0.75, 1.0)


def suite_presets(suite: str, base: DcatConfig | None = None):
    """Named config variants for one comparison suite.

    The named set covers single-branch baselines, class-token-only fusion,
    cross-patch fusion with and without ranking, and a keep-ratio sweep.
    """
    if base is None:
        base = DcatConfig()
    base = dataclasses.replace(base, dual_input=True, cpa_enabled=True,
                               ranking_enabled=True, cca_mode=False)

    def variant(**kw):
        return dataclasses.replace(base, **kw)

    named = {
        "global-only": variant(dual_input=False, single_branch="global",
                               cpa_enabled=False),
        "mip-only": variant(dual_input=False, single_branch="mip",
                            cpa_enabled=False),
        "dual-cca": variant(cca_mode=True, ranking_enabled=False),
        "dual-cpa": variant(ranking_enabled=False),
        "dual-cpa-ranking": base,
        "dual": base,
    }
    sweep = [(f"alpha-{a:g}",
              variant(alpha_global=float(a), alpha_mip=float(a)))
             for a in ALPHA_SWEEP]
    tables = {
        "table5": ["global-only", "dual-cca", "dual-cpa", "dual-cpa-ranking"],
        "table6": ["global-only", "mip-only", "dual"],
        "table7": ["dual-cca", "dual-cpa-ranking"],
    }
    if suite in tables:
        return [(name, named[name]) for name in tables[suite]]
    if suite == "fig3":
        return sweep
    if suite == "all":
        order = ["global-only", "mip-only", "dual-cca", "dual-cpa",
                 "dual-cpa-ranking"]
        return [(name, named[name]) for name in order] + sweep
    raise ConfigError(f"unknown suite {suite!r}; choose from {SUITES}")


@dataclass
class PresetOutcome:
    name: str
    config: DcatConfig
    accuracies: list = field(default_factory=list)
    mean: float = 0.0
    std: float = 0.0
    models: list | None = None


def run_ablation_suite(presets, train_ds: Dataset, eval_ds: Dataset,
                       tc: TrainConfig, seeds=(0, 1, 2),
                       keep_models: bool = False,
                       progress=None) -> list[PresetOutcome]:
    """Train every preset across the shared seed set and score on eval_ds."""
    seeds = [int(s) for s in seeds]
    if len(seeds) < 3:
        raise ConfigError("the comparison suite needs at least 3 seeds")
    outcomes = []
    for name, cfg in presets:
        accs = []
        models = [] if keep_models else None
        for seed in seeds:
            model = DcatModel(dataclasses.replace(cfg, seed=seed))
            train(model, train_ds, dataclasses.replace(tc, seed=seed))
            ev = evaluate(model, eval_ds)
            accs.append(float(ev.metric))
            if keep_models:
                models.append(model)
            if progress is not None:
                progress(name, seed, float(ev.metric))
        outcomes.append(PresetOutcome(
            name=name, config=cfg, accuracies=accs,
            mean=float(np.mean(accs)), std=float(np.std(accs)),
            models=models))
    return outcomes


def suite_csv(outcomes: list[PresetOutcome]) -> str:
    lines = ["preset,mean_accuracy,std_accuracy,seed_accuracies"]
    for o in outcomes:
        per_seed = ";".join(repr(a) for a in o.accuracies)
        lines.append(f"{o.name},{o.mean!r},{o.std!r},{per_seed}")
    return "\n".join(lines) + "\n"
