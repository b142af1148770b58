"""Dual-branch transformer over paired global/crop views with ranked fusion.

Submodules import lazily so that `dcat.cli` can pin the BLAS thread count
before anything pulls in numpy. `from dcat import DcatModel` and friends
work as usual; the bare `train` function lives at `dcat.train.train` to
avoid shadowing the submodule.
"""

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    "Tensor": "tensor",
    "GradTape": "tensor",
    "NumericError": "tensor",
    "ShapeError": "tensor",
    "ConfigError": "configio",
    "DcatConfig": "model",
    "DcatModel": "model",
    "param_report": "model",
    "save_checkpoint": "model",
    "load_checkpoint": "model",
    "linear_cka": "model",
    "AttentionRecord": "record",
    "SynthSpec": "synth",
    "DualSample": "synth",
    "Dataset": "synth",
    "DataError": "synth",
    "bayes_rates": "synth",
    "generate_dataset": "synth",
    "samples_to_dataset": "synth",
    "load_dataset": "synth",
    "TrainConfig": "train",
    "DivergenceError": "train",
    "evaluate": "train",
    "load_run_config": "train",
    "run_ablation_suite": "train",
    "suite_presets": "train",
    "suite_csv": "train",
    "DcatClassifier": "estimator",
    "DcatRegressor": "estimator",
    "dataset_to_matrix": "estimator",
    "matrix_to_dataset": "estimator",
    "inspect_outputs": "visualize",
    "keep_box_overlap": "visualize",
    "cka_rows": "visualize",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name):
    target = _EXPORTS.get(name)
    if target is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    value = getattr(importlib.import_module(f".{target}", __name__), name)
    globals()[name] = value
    return value


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
