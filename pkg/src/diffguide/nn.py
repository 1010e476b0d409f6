"""Dense classifier building blocks shared by guidance heads and metric classifiers."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import autodiff as ad


def init_dense(widths: Sequence[int], rng: np.random.Generator) -> list[np.ndarray]:
    params = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32))
        params.append(np.zeros(fan_out, np.float32))
    return params


def dense_graph(x, params: Sequence, return_hidden: bool = False):
    """silu MLP; the last layer is linear. Optionally returns the penultimate activations."""
    h = ad.as_var(x)
    n_layers = len(params) // 2
    for i in range(n_layers - 1):
        h = ad.silu(ad.affine(h, params[2 * i], params[2 * i + 1]))
    out = ad.affine(h, params[-2], params[-1])
    return (out, h) if return_hidden else out


def cross_entropy(log_probs, targets: np.ndarray):
    """Mean negative log-likelihood; ``targets`` indexes the last axis."""
    picked = ad.take_along_last(log_probs, targets)
    return ad.vmean(picked) * -1.0
