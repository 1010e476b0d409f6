"""Noise schedules and the per-step quantities derived from them.

Timesteps run ``1..T`` in every public function; ``t = 0`` denotes clean data
(``alpha_bar(0) == 1``). Arrays are stored 0-indexed and in double precision.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "NoiseSchedule",
    "build_linear",
    "build_cosine",
    "build_schedule",
    "ddpm_sigma",
    "ddim_sigma",
]

COSINE_MIN_ALPHA = 0.001


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    T: int
    alphas: np.ndarray
    alpha_bars: np.ndarray
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for arr in (self.alphas, self.alpha_bars):
            arr.setflags(write=False)

    @property
    def betas(self) -> np.ndarray:
        return 1.0 - self.alphas

    def _check(self, t, lo: int = 1) -> None:
        ta = np.asarray(t)
        if np.any(ta < lo) or np.any(ta > self.T):
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")

    def alpha(self, t):
        self._check(t)
        return self.alphas[np.asarray(t) - 1]

    def alpha_bar(self, t):
        """ᾱ_t for ``0 <= t <= T`` (scalar or integer array)."""
        self._check(t, lo=0)
        return self._alpha_bars_from0[np.asarray(t)]

    @cached_property
    def _alpha_bars_from0(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bars])

    def beta(self, t):
        return 1.0 - self.alpha(t)

    def to_config(self) -> dict:
        return {"kind": self.kind, "T": self.T, **self.params}

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.alpha_bars.tobytes())
        return h.hexdigest()[:16]


def _from_alphas(kind: str, alphas: np.ndarray, params: dict) -> NoiseSchedule:
    alphas = np.asarray(alphas, dtype=np.float64)
    if not np.all((alphas > 0) & (alphas < 1)):
        raise ValueError("per-step alphas must lie in (0, 1)")
    return NoiseSchedule(kind, len(alphas), alphas, np.cumprod(alphas), params)


def build_linear(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    return _from_alphas("linear", 1.0 - betas, {"beta_start": beta_start, "beta_end": beta_end})


def cosine_alpha_bar(t, T: int, s: float = 0.008):
    """Unclamped closed form f(t)/f(0) of the cosine schedule."""

    def f(u):
        return np.cos((np.asarray(u, dtype=np.float64) / T + s) / (1 + s) * math.pi / 2) ** 2

    return f(t) / f(0)


def build_cosine(T: int, s: float = 0.008) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if s <= 0:
        raise ValueError(f"cosine offset s must be positive, got {s}")
    ab = cosine_alpha_bar(np.arange(int(T) + 1), int(T), s)
    alphas = np.clip(ab[1:] / ab[:-1], COSINE_MIN_ALPHA, None)
    return _from_alphas("cosine", alphas, {"s": s})


def build_schedule(kind: str, T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                   s: float = 0.008) -> NoiseSchedule:
    if kind == "linear":
        return build_linear(T, beta_start, beta_end)
    if kind == "cosine":
        return build_cosine(T, s)
    raise ValueError(f"unknown schedule kind {kind!r}")


def ddpm_sigma(s: NoiseSchedule, t: int, variant: str = "posterior") -> float:
    s._check(t)
    beta = float(s.beta(t))
    if variant == "beta":
        return math.sqrt(beta)
    if variant == "posterior":
        ab_t = float(s.alpha_bar(t))
        ab_prev = float(s.alpha_bar(t - 1))
        return math.sqrt(beta * (1.0 - ab_prev) / (1.0 - ab_t))
    raise ValueError(f"unknown sigma variant {variant!r}")


def ddim_sigma(s: NoiseSchedule, t_from: int, t_to: int, eta: float) -> tuple[float, float]:
    """Return ``(sigma, direction_coefficient)`` for a DDIM jump ``t_from -> t_to``."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    if t_to >= t_from:
        raise ValueError(f"DDIM step must go backwards, got {t_from} -> {t_to}")
    s._check(t_from)
    ab_from = float(s.alpha_bar(t_from))
    ab_to = float(s.alpha_bar(t_to))
    sigma = eta * math.sqrt((1 - ab_to) / (1 - ab_from)) * math.sqrt(1 - ab_from / ab_to)
    direction = math.sqrt(max(1.0 - ab_to - sigma**2, 0.0))
    return sigma, direction
