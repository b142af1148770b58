"""Side-channel capture of attention maps and token features during forward.

An AttentionRecord is passed through the model optionally; components append
what they computed without changing the computation itself. Keys are
(branch, stage, kind) where `stage` counts recorded events within a branch in
forward order and `kind` names the producing mechanism.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ATTENTION_KINDS = ("mhsa", "ranking", "cpa", "cca")
FEATURE_KINDS = ("embed", "block", "fusion")


@dataclass
class AttentionRecord:
    """Attention probability maps, kept-token indices, and token snapshots.

    attention values are probability arrays whose last axis sums to 1 (the
    class column of ranking entries has already been dropped and the rest
    renormalized). kept holds [batch, k] index arrays into the pre-selection
    token order. features holds [batch, tokens, dim] snapshots for the
    representation-similarity probe.
    """

    attention: dict = field(default_factory=dict)
    kept: dict = field(default_factory=dict)
    features: dict = field(default_factory=dict)
    _stage: dict = field(default_factory=dict)

    def next_stage(self, branch: str) -> int:
        stage = self._stage.get(branch, 0)
        self._stage[branch] = stage + 1
        return stage

    def add_attention(self, branch: str, stage: int, kind: str, probs: np.ndarray) -> None:
        if kind not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention kind {kind!r}")
        self.attention[(branch, stage, kind)] = np.asarray(probs)

    def add_kept(self, branch: str, stage: int, kind: str, indices: np.ndarray) -> None:
        self.kept[(branch, stage, kind)] = np.asarray(indices)

    def add_features(self, branch: str, stage: int, kind: str, tokens: np.ndarray) -> None:
        if kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {kind!r}")
        self.features[(branch, stage, kind)] = np.asarray(tokens)

    def branch_features(self, branch: str) -> list:
        """Feature snapshots of one branch in forward order."""
        keys = sorted(k for k in self.features if k[0] == branch)
        return [(k, self.features[k]) for k in keys]
