"""Command-line workbench: generate, train, eval, ablate, params, inspect.

Exit codes: 0 success, 2 config problem, 3 data problem, 4 numeric
divergence. BLAS thread pools size themselves at the first numpy import,
so the DCAT_THREADS pin (default 1, for run-to-run determinism) happens
at module scope before anything numeric loads.
"""

import argparse
import os
import sys

_THREADS = os.environ.get("DCAT_THREADS", "1")
_THREADS_OK = _THREADS.isdigit() and int(_THREADS) >= 1
if _THREADS_OK:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS",
                 "VECLIB_MAXIMUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import dataclasses                                          # noqa: E402
from importlib import resources                             # noqa: E402

from .archive import ArchiveError                           # noqa: E402
from .configio import ConfigError                           # noqa: E402
from .model import DcatModel, load_checkpoint, param_report  # noqa: E402
from .netpbm import NetpbmError                             # noqa: E402
from .synth import (                                        # noqa: E402
    DataError,
    SynthSpec,
    generate_dataset,
    load_dataset,
    load_spec,
)
from .train import (                                        # noqa: E402
    SUITES,
    DivergenceError,
    evaluate,
    load_run_config,
    run_ablation_suite,
    suite_csv,
    suite_presets,
    train,
)
from .visualize import inspect_outputs                      # noqa: E402

__all__ = ["main", "build_parser"]


# ----------------------------------------------------------------------
# Input resolution


def read_config_text(ref: str) -> str:
    """Config file contents from a path, or from a bundled preset name."""
    if os.path.isfile(ref):
        with open(ref, "r", encoding="utf-8") as fh:
            return fh.read()
    name = ref if ref.endswith(".cfg") else ref + ".cfg"
    if os.sep not in name:
        res = resources.files(__package__) / "presets" / name
        if res.is_file():
            return res.read_text(encoding="utf-8")
    raise ConfigError(
        f"config {ref!r}: no such file or preset "
        f"(presets: {', '.join(preset_names())})")


def preset_names() -> list:
    folder = resources.files(__package__) / "presets"
    return sorted(p.name[:-4] for p in folder.iterdir()
                  if p.name.endswith(".cfg"))


def _load_data(path: str):
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None


def _load_ckpt(path: str) -> DcatModel:
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None


# ----------------------------------------------------------------------
# Subcommands


def cmd_generate(args) -> int:
    if args.spec and not os.path.isfile(args.spec):
        raise ConfigError(f"spec {args.spec!r}: no such file")
    spec = load_spec(args.spec) if args.spec else SynthSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    generate_dataset(spec, args.n, out_dir=args.out)
    print(f"wrote {args.n} samples ({spec.side}px, seed {spec.seed}) "
          f"to {args.out}")
    return 0


def _resolved_configs(args):
    cfg, tc = load_run_config(read_config_text(args.config))
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
        tc = dataclasses.replace(tc, seed=args.seed)
    if getattr(args, "precision", None):
        cfg = dataclasses.replace(cfg, precision=args.precision)
        tc = dataclasses.replace(tc, precision=args.precision)
    return cfg, tc


def cmd_train(args) -> int:
    cfg, tc = _resolved_configs(args)
    train_ds = _load_data(args.data)
    eval_ds = _load_data(args.eval) if args.eval else None
    os.makedirs(args.out, exist_ok=True)
    model = DcatModel(cfg)
    result = train(model, train_ds, tc, eval_dataset=eval_ds,
                   log_path=os.path.join(args.out, "metrics.csv"),
                   ckpt_path=os.path.join(args.out, "model.ckpt"))
    final = result.final("train")
    print(f"epochs={tc.epochs} final train loss={final[2]!r} "
          f"metric={final[3]!r}")
    if eval_ds is not None:
        ft = result.final("test")
        print(f"final test loss={ft[2]!r} metric={ft[3]!r}")
    print(f"wrote {os.path.join(args.out, 'model.ckpt')} and metrics.csv")
    return 0


def cmd_eval(args) -> int:
    model = _load_ckpt(args.ckpt)
    ev = evaluate(model, _load_data(args.data))
    print(f"n={ev.n}")
    print(f"loss={ev.loss!r}")
    print(f"{ev.metric_name}={ev.metric!r}")
    if ev.confusion is not None:
        print("confusion (rows = true class):")
        for row in ev.confusion:
            print(" ".join(str(int(v)) for v in row))
    return 0


def cmd_ablate(args) -> int:
    cfg, tc = _resolved_configs(args)
    presets = suite_presets(args.suite, cfg)
    train_ds = _load_data(args.data)
    eval_ds = _load_data(args.eval)
    base = args.seed if args.seed is not None else 0
    seeds = tuple(base + i for i in range(args.seeds))

    def progress(name, seed, acc):
        print(f"[{args.suite}] {name} seed={seed} accuracy={acc:.4f}",
              file=sys.stderr)

    outcomes = run_ablation_suite(presets, train_ds, eval_ds, tc,
                                  seeds=seeds, progress=progress)
    table = suite_csv(outcomes)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "suite.csv")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(table)
        print(f"wrote {path}", file=sys.stderr)
    print(table, end="")
    return 0


def cmd_params(args) -> int:
    cfg, _ = _resolved_configs(args)
    total, sections = param_report(DcatModel(cfg))
    print(f"total={total}")
    for section, count in sections.items():
        print(f"{section}={count}")
    return 0


def cmd_inspect(args) -> int:
    model = _load_ckpt(args.ckpt)
    dataset = _load_data(args.data)
    written = inspect_outputs(model, dataset, args.sample, args.out,
                              cka_n=args.n)
    for path in written:
        print(path)
    return 0


# ----------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcat",
        description="Dual-branch cross-patch attention workbench.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate",
                       help="render a synthetic dual-view dataset")
    g.add_argument("--spec", help="generator key=value file (optional)")
    g.add_argument("--n", type=int, required=True, help="sample count")
    g.add_argument("--out", required=True, help="dataset directory to write")
    g.add_argument("--seed", type=int, help="override the generator seed")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--config", required=True,
                   help="run config path or preset name")
    t.add_argument("--data", required=True, help="training dataset directory")
    t.add_argument("--eval", help="held-out dataset logged each epoch")
    t.add_argument("--out", required=True,
                   help="directory for model.ckpt and metrics.csv")
    t.add_argument("--seed", type=int, help="override model and run seed")
    t.add_argument("--precision", choices=("f32", "f64"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True, help="checkpoint path")
    e.add_argument("--data", required=True, help="dataset directory")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate",
                       help="train and compare a suite of config variants")
    a.add_argument("--suite", required=True, choices=SUITES)
    a.add_argument("--config", default="desk",
                   help="base run config path or preset name")
    a.add_argument("--data", required=True, help="training dataset directory")
    a.add_argument("--eval", required=True, help="scoring dataset directory")
    a.add_argument("--seeds", type=int, default=3,
                   help="number of seeds per preset (>= 3)")
    a.add_argument("--seed", type=int, help="first seed of the set")
    a.add_argument("--precision", choices=("f32", "f64"))
    a.add_argument("--out", help="directory for suite.csv (default: stdout only)")
    a.set_defaults(func=cmd_ablate)

    p = sub.add_parser("params",
                       help="print trainable parameter counts for a config")
    p.add_argument("--config", required=True,
                   help="run config path or preset name")
    p.set_defaults(func=cmd_params)

    i = sub.add_parser("inspect",
                       help="export keep-masks, attention overlays, and CKA")
    i.add_argument("--ckpt", required=True, help="checkpoint path")
    i.add_argument("--data", required=True, help="dataset directory")
    i.add_argument("--sample", type=int, default=0,
                   help="sample index for masks and overlays")
    i.add_argument("--out", required=True, help="artifact directory")
    i.add_argument("--n", type=int, default=256,
                   help="held-out sample count for the CKA probe")
    i.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    if not _THREADS_OK:
        print(f"error: DCAT_THREADS must be a positive integer, "
              f"got {_THREADS!r}", file=sys.stderr)
        return 2
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, NetpbmError, ArchiveError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
