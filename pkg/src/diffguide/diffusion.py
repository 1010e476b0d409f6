"""Forward-process arithmetic: marginal noising, single-step corruption, x̂₀.

All functions take their noise explicitly. Inputs may be numpy arrays or
autodiff :class:`~diffguide.autodiff.Var` nodes (``estimate_x0`` and
``noising`` are used inside differentiated guidance graphs).
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Var, clip
from .schedule import NoiseSchedule


def _shape(a) -> tuple[int, ...]:
    return a.shape if isinstance(a, (Var, np.ndarray)) else np.shape(a)


def _same_shape(a, b) -> None:
    if _shape(a) != _shape(b):
        raise ValueError(f"shape mismatch: {_shape(a)} vs {_shape(b)}")


def _is_var(x) -> bool:
    return isinstance(x, Var)


def noising(s: NoiseSchedule, x0, t: int, eps):
    """x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) eps."""
    _same_shape(x0, eps)
    s._check(t, lo=0)
    ab = float(s.alpha_bar(t))
    if not (_is_var(x0) or _is_var(eps)):
        x0, eps = np.asarray(x0, np.float64), np.asarray(eps, np.float64)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def forward_step(s: NoiseSchedule, x_prev, t: int, eps):
    """One Markov corruption step q(x_t | x_{t-1})."""
    _same_shape(x_prev, eps)
    a = float(s.alpha(t))
    return math.sqrt(a) * np.asarray(x_prev, np.float64) + math.sqrt(1.0 - a) * np.asarray(eps, np.float64)


def estimate_x0(s: NoiseSchedule, x_t, t: int, eps_pred, clamp: tuple[float, float] | None = None):
    """Invert the marginal noising given a noise prediction; optional clamp to a data range."""
    _same_shape(x_t, eps_pred)
    s._check(t)
    ab = float(s.alpha_bar(t))
    if not (_is_var(x_t) or _is_var(eps_pred)):
        x_t, eps_pred = np.asarray(x_t, np.float64), np.asarray(eps_pred, np.float64)
    x0 = (x_t - math.sqrt(1.0 - ab) * eps_pred) * (1.0 / math.sqrt(ab))
    if clamp is not None:
        lo, hi = clamp
        x0 = clip(x0, lo, hi) if _is_var(x0) else np.clip(x0, lo, hi)
    return x0
