"""Counter-based Gaussian streams for sampling chains.

Every draw is a pure function of ``(seed, chain, step, stream, coordinate)``, so
a chain's noise does not depend on how chains are batched or spread across
threads. The mixing function is the SplitMix64 finalizer applied to a combined
64-bit counter; pairs of uniforms become normals via Box-Muller.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

# stream tags
INIT = 1
STEP = 2


def _mix(z: np.ndarray) -> np.ndarray:
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


def _key(*parts) -> np.ndarray:
    with np.errstate(over="ignore"):
        h = np.uint64(0)
        for p in parts:
            h = _mix(np.asarray(h + _GOLDEN, dtype=np.uint64) ^ np.asarray(p, dtype=np.uint64))
        return h


def uniforms(seed: int, chains, step: int, stream: int, n: int) -> np.ndarray:
    """Uniforms on (0, 1], shape ``(len(chains), n)``."""
    chains = np.asarray(chains, dtype=np.uint64).reshape(-1, 1)
    base = _key(np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(stream), np.uint64(step))
    with np.errstate(over="ignore"):
        per_chain = _mix(base ^ _mix(chains * _GOLDEN + _GOLDEN))
        ctr = np.arange(n, dtype=np.uint64).reshape(1, -1)
        bits = _mix(per_chain + (ctr + np.uint64(1)) * _GOLDEN)
    return ((bits >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53


def normals(seed: int, chains, step: int, shape: tuple[int, ...], stream: int = STEP) -> np.ndarray:
    """Standard normals of shape ``(len(chains), *shape)`` in float64."""
    n = int(np.prod(shape, dtype=np.int64))
    half = (n + 1) // 2
    u = uniforms(seed, chains, step, stream, 2 * half)
    r = np.sqrt(-2.0 * np.log(u[:, :half]))
    theta = 2.0 * np.pi * u[:, half:]
    z = np.concatenate([r * np.cos(theta), r * np.sin(theta)], axis=1)[:, :n]
    return z.reshape((len(u),) + tuple(shape))
