"""Shared oracles for the test suite.

The gradient oracle is central finite differences evaluated in float64,
independent of the tape: it re-runs the forward closure with single scalar
entries nudged by +/- h. Relative error uses max(|analytic|, |numeric|, floor)
in the denominator so zero gradients compare exactly.
"""

from __future__ import annotations

import numpy as np

from dcat.tensor import Tensor


def finite_difference_grad(f, param: Tensor, h: float = 1e-5) -> np.ndarray:
    """d f() / d param by central differences; f re-runs the forward pass."""
    base = param.data
    grad = np.zeros_like(base, dtype=np.float64)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f()
        flat[i] = keep - h
        down = f()
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-8) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def ref_layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def ref_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def ref_gelu(x):
    from scipy.special import erf
    return x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


def ref_mhsa(x, p, heads):
    """Plain-numpy multi-head self-attention mirroring the tape op."""
    b, t, d = x.shape
    hd = d // heads

    def proj(w, bias):
        return (x @ p[w].data + p[bias].data).reshape(b, t, heads, hd).transpose(0, 2, 1, 3)

    q, k, v = proj("wq", "bq"), proj("wk", "bk"), proj("wv", "bv")
    attn = ref_softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(hd))
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return out @ p["wo"].data + p["bo"].data


def ref_block(x, p, heads):
    x = x + ref_mhsa(ref_layer_norm(x, p["ln1.g"].data, p["ln1.b"].data), p, heads)
    h = ref_gelu(ref_layer_norm(x, p["ln2.g"].data, p["ln2.b"].data)
                 @ p["mlp.w1"].data + p["mlp.b1"].data)
    return x + h @ p["mlp.w2"].data + p["mlp.b2"].data


def check_grads(build_loss, params: list, h: float = 1e-5, tol: float = 1e-6) -> float:
    """Assert tape gradients of `build_loss()` match finite differences.

    `build_loss` constructs the forward pass from scratch (so FD re-runs see
    the perturbed parameters) and returns a scalar Tensor. Params must be
    float64 trainable leaves. Returns the worst relative error seen.
    """
    from dcat.tensor import GradTape

    for p in params:
        p.grad = None
    with GradTape() as tape:
        loss = build_loss()
    tape.backward(loss)

    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = finite_difference_grad(lambda: build_loss().item(), p, h=h)
        err = max_relative_error(analytic, numeric)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch {err:.3e} on param shape {p.shape}"
    return worst
