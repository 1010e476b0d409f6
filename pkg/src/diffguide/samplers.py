"""Reverse-process samplers (DDPM, DDIM) and the guided sampling loop."""

from __future__ import annotations

import inspect
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import dtns, rng
from .diffusion import _same_shape, estimate_x0
from .schedule import NoiseSchedule, ddim_sigma, ddpm_sigma

CHUNK = 1024

GuidanceHook = Callable[..., np.ndarray]


class SamplingError(RuntimeError):
    pass


def uniform_steps(T: int, n: int) -> list[int]:
    """``n`` evenly strided timesteps ``T, T - T/n, ..., T/n``."""
    if not 1 <= n <= T:
        raise ValueError(f"need 1 <= n <= T, got n={n}, T={T}")
    stride = T // n
    return [T - i * stride for i in range(n)]


@dataclass
class SamplerConfig:
    method: str = "ddpm"
    steps: list[int] | None = None  # None: every timestep (ddpm) / see num_steps (ddim)
    num_steps: int | None = None
    eta: float = 0.0
    sigma_variant: str = "posterior"
    seed: int = 0
    chains: int = 1
    record_trace: bool = False
    cfg_weight: float | None = None
    clamp: tuple[float, float] | None = None

    def __post_init__(self):
        if self.method not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler {self.method!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must be in [0, 1]")
        if self.chains < 1:
            raise ValueError("chains must be >= 1")

    def resolve_steps(self, T: int) -> list[int]:
        if self.steps is not None:
            steps = [int(t) for t in self.steps]
        elif self.num_steps is not None:
            steps = uniform_steps(T, self.num_steps)
        else:
            steps = list(range(T, 0, -1))
        if any(a <= b for a, b in zip(steps, steps[1:])) or steps[-1] < 1 or steps[0] > T:
            raise ValueError("steps must be strictly descending within [1, T]")
        if self.method == "ddpm" and steps != list(range(steps[0], 0, -1)):
            raise ValueError("ddpm needs consecutive steps ending at 1; use ddim for sub-sequences")
        return steps


@dataclass
class SampleTrace:
    t: list[int] = field(default_factory=list)
    x_t: list[np.ndarray] = field(default_factory=list)
    x0: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.t)


def ddpm_step(s: NoiseSchedule, x_t, t: int, eps_pred, sigma: float, z) -> np.ndarray:
    _same_shape(x_t, eps_pred)
    _same_shape(x_t, z)
    a = float(s.alpha(t))
    ab = float(s.alpha_bar(t))
    mean = (np.asarray(x_t, np.float64) - (1.0 - a) / math.sqrt(1.0 - ab) * np.asarray(eps_pred, np.float64)) / math.sqrt(a)
    if t == 1:
        return mean
    return mean + sigma * np.asarray(z, np.float64)


def ddim_step(s: NoiseSchedule, x_t, t_from: int, t_to: int, eps_pred, eta: float, z=None,
              clamp=None) -> tuple[np.ndarray, np.ndarray]:
    _same_shape(x_t, eps_pred)
    sigma, direction = ddim_sigma(s, t_from, t_to, eta)
    x0 = estimate_x0(s, x_t, t_from, eps_pred, clamp)
    if clamp is not None:
        eps_pred = eps_from_x0(s, x_t, t_from, x0)
    x_next = math.sqrt(float(s.alpha_bar(t_to))) * x0 + direction * np.asarray(eps_pred, np.float64)
    if sigma > 0:
        if z is None:
            raise ValueError("eta > 0 needs a noise tensor")
        _same_shape(x_t, z)
        x_next = x_next + sigma * np.asarray(z, np.float64)
    return x_next, x0


def eps_from_x0(s: NoiseSchedule, x_t, t: int, x0) -> np.ndarray:
    """Noise consistent with ``x_t`` and a (possibly clamped) clean estimate."""
    ab = float(s.alpha_bar(t))
    return (np.asarray(x_t, np.float64) - math.sqrt(ab) * np.asarray(x0, np.float64)) / math.sqrt(1.0 - ab)


def cfg_epsilon(eps_uncond, eps_cond, w: float) -> np.ndarray:
    _same_shape(eps_uncond, eps_cond)
    return (1.0 + w) * np.asarray(eps_cond, np.float64) - w * np.asarray(eps_uncond, np.float64)


def _predict(m, x, t, label, w):
    if label is None:
        return m.predict_epsilon(x, t)
    eps_c = m.predict_epsilon(x, t, label)
    if not w:
        return eps_c
    return cfg_epsilon(m.predict_epsilon(x, t, None), eps_c, w)


def _accepts_chains(hook) -> bool:
    try:
        return "chains" in inspect.signature(hook).parameters
    except (TypeError, ValueError):
        return False


def _run_chunk(m, s: NoiseSchedule, cfg: SamplerConfig, steps, hook, label, chains: np.ndarray):
    shape = tuple(m.data_shape)
    x = rng.normals(cfg.seed, chains, 0, shape, stream=rng.INIT)
    lab = None if label is None else (label if np.ndim(label) == 0 else np.asarray(label)[chains])
    pass_chains = hook is not None and _accepts_chains(hook)
    trace = SampleTrace() if cfg.record_trace else None
    for i, t in enumerate(steps):
        t_to = steps[i + 1] if i + 1 < len(steps) else 0
        eps = _predict(m, x, t, lab, cfg.cfg_weight)
        if hook is not None:
            eps = hook(x, t, eps, chains=chains) if pass_chains else hook(x, t, eps)
        if cfg.method == "ddpm":
            z = rng.normals(cfg.seed, chains, t, shape) if t > 1 else np.zeros_like(x)
            x0 = estimate_x0(s, x, t, eps, cfg.clamp)
            if cfg.clamp is not None:
                eps = eps_from_x0(s, x, t, x0)
            x_next = ddpm_step(s, x, t, eps, ddpm_sigma(s, t, cfg.sigma_variant), z)
        else:
            z = rng.normals(cfg.seed, chains, t, shape) if cfg.eta > 0 else None
            x_next, x0 = ddim_step(s, x, t, t_to, eps, cfg.eta, z, cfg.clamp)
        if not np.all(np.isfinite(x_next)):
            bad = chains[~np.isfinite(x_next.reshape(len(chains), -1)).all(axis=1)]
            raise SamplingError(f"non-finite state at t={t} in chains {bad[:10].tolist()}")
        if trace is not None:
            trace.t.append(t)
            trace.x_t.append(x.copy())
            trace.x0.append(np.asarray(x0).copy())
        x = x_next
    return x, trace


def sample_loop(m, s: NoiseSchedule, cfg: SamplerConfig, hook: GuidanceHook | None = None,
                label=None) -> tuple[np.ndarray, SampleTrace | None]:
    """Draw ``cfg.chains`` samples; chain ``i`` uses noise streams keyed by (seed, i, step).

    ``label`` may be a class id for every chain or an array with one id per chain.
    Chains are processed in fixed blocks so results do not depend on ``DG_THREADS``.
    """
    steps = cfg.resolve_steps(s.T)
    if label is not None and np.ndim(label) and len(label) != cfg.chains:
        raise ValueError("per-chain labels must have one entry per chain")
    blocks = [np.arange(a, min(a + CHUNK, cfg.chains)) for a in range(0, cfg.chains, CHUNK)]
    threads = max(1, int(os.environ.get("DG_THREADS", "1")))

    def job(chains):
        return _run_chunk(m, s, cfg, steps, hook, label, chains)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, blocks))
    else:
        results = [job(b) for b in blocks]
    samples = np.concatenate([r[0] for r in results])
    trace = None
    if cfg.record_trace:
        trace = SampleTrace(list(results[0][1].t),
                            [np.concatenate([r[1].x_t[i] for r in results]) for i in range(len(steps))],
                            [np.concatenate([r[1].x0[i] for r in results]) for i in range(len(steps))])
    return samples, trace


def save_samples(path, samples: np.ndarray, cfg: SamplerConfig, schedule: NoiseSchedule,
                 model_hash: str = "") -> None:
    """Write samples as DTNS plus a ``.json`` sidecar describing how they were drawn."""
    dtns.save(path, samples.astype(np.float32))
    meta = {"seed": cfg.seed, "config": asdict(cfg), "schedule": schedule.to_config(),
            "schedule_hash": schedule.fingerprint(), "model_hash": model_hash}
    with open(os.fspath(path) + ".json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
