"""Noise-prediction models.

Two backends share the ``predict_epsilon`` contract:

* :class:`AnalyticDenoiser` - the exact optimal denoiser for diagonal Gaussian
  mixture data, used as ground truth.
* :class:`MlpDenoiser` - a small time-conditioned dense network with exposed
  hidden activations ("taps"), trained by :func:`train_denoiser`.

Hidden layers are indexed from 0; the default taps ``(1, 2)`` are the middle
and the last hidden layer.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Var
from .optim import make_optimizer
from .schedule import NoiseSchedule, build_schedule

log = logging.getLogger(__name__)

NOISING_MODES = ("deterministic_zero", "fixed_seed", "fresh")


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Gaussian mixtures


@dataclass(frozen=True, eq=False)
class GmmSpec:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.asarray(self.variances, dtype=np.float64)
        if var.ndim == 1 and len(var) == len(w) and mu.shape[1] != len(var):
            var = np.repeat(var[:, None], mu.shape[1], axis=1)
        var = np.broadcast_to(var, mu.shape).copy()
        if w.ndim != 1 or len(w) != len(mu):
            raise ValueError("weights and means disagree on component count")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(var <= 0):
            raise ValueError("component variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def K(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        k = rng.choice(self.K, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[k] + np.sqrt(self.variances[k]) * z, k

    def component(self, k: int) -> "GmmSpec":
        return GmmSpec(np.ones(1), self.means[k : k + 1], self.variances[k : k + 1])

    def to_config(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "variances": self.variances.tolist()}


def gmm_marginal(gmm: GmmSpec, s: NoiseSchedule, t: int) -> GmmSpec:
    """Push the mixture through q(x_t | x_0)."""
    if t == 0:
        return gmm
    ab = float(s.alpha_bar(t))
    return GmmSpec(gmm.weights, math.sqrt(ab) * gmm.means, ab * gmm.variances + (1.0 - ab))


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    return (x[None], True) if x.ndim == 1 else (x, False)


def component_log_density(gmm: GmmSpec, x: np.ndarray) -> np.ndarray:
    """log w_k + log N(x; mu_k, diag var_k), shape (n, K)."""
    diff = x[:, None, :] - gmm.means[None]
    quad = (diff**2 / gmm.variances[None]).sum(-1)
    logdet = np.log(2 * np.pi * gmm.variances).sum(-1)
    return np.log(gmm.weights)[None] - 0.5 * (quad + logdet[None])


def responsibilities(gmm: GmmSpec, x) -> np.ndarray:
    xb, squeeze = _as_batch(x)
    lp = component_log_density(gmm, xb)
    lp -= lp.max(axis=1, keepdims=True)
    r = np.exp(lp)
    r /= r.sum(axis=1, keepdims=True)
    return r[0] if squeeze else r


def gmm_score(gmm: GmmSpec, s: NoiseSchedule, x, t: int) -> np.ndarray:
    """∇_x log p_t(x) for the noised mixture."""
    xb, squeeze = _as_batch(x)
    mg = gmm_marginal(gmm, s, t)
    r = responsibilities(mg, xb)
    per_comp = (mg.means[None] - xb[:, None, :]) / mg.variances[None]
    score = (r[..., None] * per_comp).sum(1)
    return score[0] if squeeze else score


def component_score(gmm: GmmSpec, s: NoiseSchedule, x, t: int, k: int) -> np.ndarray:
    xb, squeeze = _as_batch(x)
    mg = gmm_marginal(gmm, s, t)
    score = (mg.means[k] - xb) / mg.variances[k]
    return score[0] if squeeze else score


def analytic_epsilon(gmm: GmmSpec, s: NoiseSchedule, x_t, t: int) -> np.ndarray:
    return -math.sqrt(1.0 - float(s.alpha_bar(t))) * gmm_score(gmm, s, x_t, t)


def posterior_mean(gmm: GmmSpec, s: NoiseSchedule, x_t, t: int) -> np.ndarray:
    """E[x_0 | x_t] assembled from per-component Gaussian conditioning."""
    xb, squeeze = _as_batch(x_t)
    ab = float(s.alpha_bar(t))
    mg = gmm_marginal(gmm, s, t)
    r = responsibilities(mg, xb)
    gain = math.sqrt(ab) * gmm.variances / mg.variances  # (K, d)
    cond = gmm.means[None] + gain[None] * (xb[:, None, :] - mg.means[None])
    out = (r[..., None] * cond).sum(1)
    return out[0] if squeeze else out


class AnalyticDenoiser:
    """Bayes-optimal ε for mixture data; a label selects a single component."""

    supports_input_gradient = False

    def __init__(self, gmm: GmmSpec, schedule: NoiseSchedule):
        self.gmm = gmm
        self.schedule = schedule
        self.data_shape = (gmm.dim,)

    def predict_epsilon(self, x_t, t: int, label=None) -> np.ndarray:
        if label is None:
            return analytic_epsilon(self.gmm, self.schedule, x_t, t)
        return analytic_epsilon(self.gmm.component(int(label)), self.schedule, x_t, t)

    def extract_features(self, *args, **kwargs):
        raise NotImplementedError("the analytic denoiser exposes no internal representations")


# ---------------------------------------------------------------------------
# Dense network


def time_embedding(t, T: int, dim: int = 32) -> np.ndarray:
    """Sinusoidal embedding of t/T; shape (dim,) for scalar t, else (n, dim)."""
    u = np.asarray(t, dtype=np.float64) / T
    half = dim // 2
    freqs = 1000.0 * 10000.0 ** (-np.arange(half) / half)
    ang = u[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass
class FeatureBundle:
    taps: dict[int, np.ndarray]
    t_feat: int

    @property
    def width(self) -> int:
        return sum(v.shape[-1] for v in self.taps.values())

    def concat(self) -> np.ndarray:
        return np.concatenate([self.taps[k] for k in sorted(self.taps)], axis=-1)


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    weighting: str = "uniform"  # or "min_snr"
    optimizer: str = "adam"

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.weighting not in ("uniform", "min_snr"):
            raise ValueError(f"unknown loss weighting {self.weighting!r}")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)


@dataclass(eq=False)
class MlpDenoiser:
    data_shape: tuple[int, ...]
    T: int
    hidden: tuple[int, ...] = (128, 128, 128)
    time_dim: int = 32
    taps: tuple[int, ...] = (1, 2)
    seed: int = 0
    params: list[np.ndarray] = field(default_factory=list)
    num_classes: int | None = None
    label_table: np.ndarray | None = None
    schedule_ref: dict = field(default_factory=dict)

    supports_input_gradient = True

    @classmethod
    def init(cls, data_shape, T: int, hidden=(128, 128, 128), time_dim: int = 32,
             taps=(1, 2), seed: int = 0, schedule_ref: dict | None = None) -> "MlpDenoiser":
        data_shape = tuple(int(n) for n in np.atleast_1d(data_shape))
        d = int(np.prod(data_shape))
        widths = [d + time_dim, *hidden, d]
        rng = np.random.default_rng(seed)
        params = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            params += [_glorot(rng, fan_in, fan_out), np.zeros(fan_out, np.float32)]
        m = cls(data_shape, T, tuple(hidden), time_dim, tuple(taps), seed, params,
                schedule_ref=dict(schedule_ref or {}))
        m._check_taps(m.taps)
        return m

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.data_shape))

    @property
    def tap_widths(self) -> dict[int, int]:
        return {i: w for i, w in enumerate(self.hidden)}

    @property
    def null_label(self) -> int:
        return self.num_classes

    def _check_taps(self, taps) -> None:
        bad = [k for k in taps if k not in self.tap_widths]
        if bad:
            raise ValueError(f"taps {bad} not exposed; hidden layers are {list(self.tap_widths)}")

    def attach_label_table(self, num_classes: int, seed: int) -> None:
        """Add a label embedding (plus a zero, frozen null row) summed into the time embedding."""
        if self.label_table is not None:
            raise ValueError("model already has a label table")
        rng = np.random.default_rng(seed)
        table = _glorot(rng, num_classes, self.time_dim)
        self.label_table = np.vstack([table, np.zeros((1, self.time_dim), np.float32)])
        self.num_classes = num_classes

    def _label_index(self, label, n: int) -> np.ndarray | None:
        if self.label_table is None:
            if label is not None:
                raise ValueError("model has no label table")
            return None
        idx = np.full(n, self.null_label) if label is None else np.broadcast_to(np.asarray(label), (n,)).copy()
        idx = np.where(idx < 0, self.null_label, idx).astype(np.int64)
        if np.any(idx > self.null_label):
            raise ValueError(f"label id out of range [0, {self.num_classes})")
        return idx

    def graph(self, x, t, label=None, taps: Sequence[int] = (), params: list | None = None,
              table=None):
        """Differentiable forward pass; returns (eps Var, {tap: Var})."""
        x = ad.as_var(x)
        n = x.shape[0]
        if int(np.prod(x.shape[1:])) != self.input_dim:
            raise ValueError(f"input width {x.shape[1:]} does not match model {self.data_shape}")
        flat = x.reshape((n, self.input_dim)) if x.ndim != 2 else x
        p = self.params if params is None else params
        emb = np.broadcast_to(time_embedding(t, self.T, self.time_dim), (n, self.time_dim))
        idx = self._label_index(label, n)
        if idx is not None:
            tbl = self.label_table if table is None else table
            emb = ad.add(emb, ad.getitem(ad.as_var(tbl), idx))
        h = ad.concat([flat, emb], axis=1)
        feats = {}
        n_hidden = len(self.hidden)
        for i in range(n_hidden):
            h = ad.silu(ad.affine(h, p[2 * i], p[2 * i + 1]))
            if i in taps:
                feats[i] = h
        out = ad.affine(h, p[2 * n_hidden], p[2 * n_hidden + 1])
        if x.ndim != 2:
            out = out.reshape(x.shape)
        return out, feats

    def forward(self, x_t, t, label=None, taps: Sequence[int] | None = None):
        taps = self.taps if taps is None else tuple(taps)
        self._check_taps(taps)
        x = np.asarray(x_t, dtype=np.float64)
        eps, feats = self.graph(x, t, label, taps)
        return eps.value, FeatureBundle({k: v.value for k, v in feats.items()}, int(np.max(t)))

    def predict_epsilon(self, x_t, t, label=None) -> np.ndarray:
        eps, _ = self.graph(np.asarray(x_t, dtype=np.float64), t, label)
        return eps.value

    def extract_features(self, x, t_feat: int, taps=None, noising_mode: str = "deterministic_zero",
                         *, seed: int = 0, rng: np.random.Generator | None = None,
                         schedule: NoiseSchedule | None = None) -> FeatureBundle:
        s = schedule or self.schedule()
        eps = feature_noise(np.shape(x), noising_mode, seed=seed, rng=rng)
        _, feats = feature_graph(self, s, np.asarray(x, np.float64), t_feat,
                                 self.taps if taps is None else taps, eps)
        return FeatureBundle({k: v.value for k, v in feats.items()}, t_feat)

    def schedule(self) -> NoiseSchedule:
        if not self.schedule_ref:
            raise ValueError("model carries no schedule reference; pass one explicitly")
        return build_schedule(**self.schedule_ref)

    def clone(self) -> "MlpDenoiser":
        return copy.deepcopy(self)

    def all_params(self) -> list[np.ndarray]:
        return self.params + ([self.label_table] if self.label_table is not None else [])

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        header = {
            "kind": "mlp_denoiser",
            "arch": {"data_shape": list(self.data_shape), "T": self.T, "hidden": list(self.hidden),
                     "time_dim": self.time_dim, "num_classes": self.num_classes},
            "taps": list(self.taps),
            "schedule": self.schedule_ref,
            "seed": self.seed,
        }
        tensors = {f"p{i}": p for i, p in enumerate(self.params)}
        if self.label_table is not None:
            tensors["label_table"] = self.label_table
        checkpoint.write(path, header, tensors)

    @classmethod
    def load(cls, path) -> "MlpDenoiser":
        header, tensors = checkpoint.read(path)
        if header.get("kind") != "mlp_denoiser":
            raise checkpoint.CheckpointError(f"{path}: not a denoiser checkpoint")
        a = header["arch"]
        n = 2 * (len(a["hidden"]) + 1)
        params = [tensors[f"p{i}"] for i in range(n)]
        return cls(tuple(a["data_shape"]), a["T"], tuple(a["hidden"]), a["time_dim"],
                   tuple(header["taps"]), header["seed"], params, a["num_classes"],
                   tensors.get("label_table"), header.get("schedule", {}))


def feature_noise(shape, mode: str, *, seed: int = 0, rng: np.random.Generator | None = None):
    if mode == "deterministic_zero":
        return np.zeros(shape)
    if mode == "fixed_seed":
        return np.random.default_rng(seed).standard_normal(shape)
    if mode == "fresh":
        if rng is None:
            raise ValueError("noising_mode='fresh' needs an rng")
        return rng.standard_normal(shape)
    raise ValueError(f"unknown noising mode {mode!r}")


def feature_graph(m: MlpDenoiser, s: NoiseSchedule, x, t_feat: int, taps, eps):
    """Re-embed a clean-domain input at ``t_feat`` and return the tapped activations.

    Differentiable with respect to ``x`` when ``x`` is a Var.
    """
    taps = tuple(taps)
    m._check_taps(taps)
    ab = float(s.alpha_bar(t_feat))
    x_feat = math.sqrt(ab) * ad.as_var(x) + math.sqrt(1.0 - ab) * np.asarray(eps, np.float64)
    return m.graph(x_feat, t_feat, None, taps)


def extract_features(m, x, t_feat: int, taps=None, noising_mode: str = "deterministic_zero", **kw) -> FeatureBundle:
    return m.extract_features(x, t_feat, taps, noising_mode, **kw)


def mlp_forward(m: MlpDenoiser, x_t, t, label=None):
    return m.forward(x_t, t, label)


def input_gradient(f: Callable[[Var], Var], x) -> np.ndarray:
    """Exact reverse-mode gradient of a scalar composition with respect to ``x``."""
    return ad.grad(f, x)


# ---------------------------------------------------------------------------
# Training


def _loss_weights(s: NoiseSchedule, t: np.ndarray, mode: str) -> np.ndarray:
    if mode == "uniform":
        return np.ones(len(t))
    ab = s.alpha_bar(t)
    snr = ab / (1.0 - ab)
    return np.minimum(snr, 5.0) / snr


def train_denoiser(m: MlpDenoiser, data, s: NoiseSchedule, cfg: TrainConfig, labels=None,
                   label_dropout: float = 0.0) -> list[float]:
    """Minimise the ε-prediction objective by minibatch descent; returns per-step losses."""
    data = np.asarray(data, dtype=np.float64)
    if len(data) == 0:
        raise ValueError("empty dataset")
    if s.T != m.T:
        raise ValueError(f"schedule has T={s.T}, model expects T={m.T}")
    if labels is not None and m.label_table is None:
        raise ValueError("labels given but the model has no label table")
    conditional = labels is not None
    rng = np.random.default_rng(cfg.seed)
    params = m.params
    trainable = params + ([m.label_table] if conditional else [])
    opt = make_optimizer(cfg.optimizer, trainable, cfg.lr)
    curve: list[float] = []
    for step in range(cfg.steps):
        idx = rng.integers(0, len(data), cfg.batch_size)
        t = rng.integers(1, s.T + 1, cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size,) + data.shape[1:])
        ab = s.alpha_bar(t).reshape((-1,) + (1,) * (data.ndim - 1))
        x_t = np.sqrt(ab) * data[idx] + np.sqrt(1.0 - ab) * eps
        lab = None
        if conditional:
            lab = np.asarray(labels)[idx].copy()
            if label_dropout > 0:
                lab[rng.random(cfg.batch_size) < label_dropout] = -1
        pv = [Var(p, requires_grad=True) for p in params]
        tv = Var(m.label_table, requires_grad=True) if conditional else None
        pred, _ = m.graph(x_t, t, lab, (), pv, tv)
        w = _loss_weights(s, t, cfg.weighting).reshape((-1,) + (1,) * (data.ndim - 1))
        per = ad.square(ad.sub(pred, eps)) * (w / np.prod(data.shape[1:]))
        loss = per.sum() * (1.0 / cfg.batch_size)
        if not np.isfinite(loss.value):
            raise TrainingDiverged(f"loss became {loss.value} at step {step} (lr={cfg.lr})")
        ad.backward(loss)
        grads = [v.grad for v in pv]
        if conditional:
            g = tv.grad if tv.grad is not None else np.zeros_like(m.label_table, dtype=np.float64)
            g[m.null_label] = 0.0
            grads.append(g)
        opt.step(grads)
        curve.append(float(loss.value))
    return curve
