"""Guidance from classifiers on denoiser representations of the running x̂₀.

A :class:`GuidanceClassifier` is trained on *clean* inputs only. At sampling
time the current ``x_t`` is mapped to x̂₀ through the denoiser, re-embedded at
the classifier's feature timestep(s) without noise, and the target's
log-probability is differentiated back to ``x_t``. The clean-image baseline
uses the same machinery with the feature stage replaced by the identity.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .denoiser import GmmSpec, MlpDenoiser, component_score, feature_graph, feature_noise, gmm_score
from .diffusion import estimate_x0
from .nn import cross_entropy, dense_graph, init_dense
from .optim import make_optimizer
from .schedule import NoiseSchedule

INPUT_MODES = ("feature_bundle", "raw_x0")


def default_t_feat(T: int) -> int:
    return max(1, round(0.7 * T))


@dataclass
class GuidanceConfig:
    lam: float = 1.0
    t_feat: int | None = None
    taps: tuple[int, ...] = (1, 2)
    noising_mode: str = "fresh"
    target: object = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("guidance weight must be non-negative")


@dataclass(eq=False)
class GuidanceClassifier:
    input_mode: str
    head: str  # "dense" or "per_cell"
    num_classes: int
    input_dim: int
    hidden: int = 64
    t_feats: tuple[int, ...] = ()
    taps: tuple[int, ...] = (1, 2)
    noising_mode: str = "fresh"
    cells: int = 1
    params: list[np.ndarray] = field(default_factory=list)
    in_mean: np.ndarray | None = None
    in_scale: np.ndarray | None = None

    def __post_init__(self):
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"unknown input mode {self.input_mode!r}")
        if self.head not in ("dense", "per_cell"):
            raise ValueError(f"unknown head {self.head!r}")

    @property
    def out_dim(self) -> int:
        return self.num_classes

    # -- graph pieces -------------------------------------------------------

    def embed(self, m: MlpDenoiser | None, s: NoiseSchedule, x0, noising_mode: str = "deterministic_zero",
              *, seed: int = 0, rng: np.random.Generator | None = None):
        """Classifier input for clean-domain ``x0`` (numpy or Var)."""
        x0 = ad.as_var(x0)
        n = x0.shape[0]
        if self.input_mode == "raw_x0":
            flat = x0.reshape((n, -1)) if x0.ndim != 2 else x0
            return _cell_patches(flat, self.cells) if self.head == "per_cell" else flat
        if m is None:
            raise ValueError("feature-bundle classifier needs the denoiser")
        parts = []
        for j, t_feat in enumerate(self.t_feats):
            eps = feature_noise(x0.shape, noising_mode, seed=seed + j, rng=rng)
            _, feats = feature_graph(m, s, x0, t_feat, self.taps, eps)
            if self.head == "per_cell":
                ab = float(s.alpha_bar(t_feat))
                x_feat = math.sqrt(ab) * x0.reshape((n, -1)) + math.sqrt(1.0 - ab) * eps.reshape(n, -1)
                # re-noised input plus the tapped layer's per-cell readout, each over a 3x3 neighbourhood
                parts += [_cell_patches(x_feat, self.cells),
                          _cell_patches(_cell_readout(m, feats, self.cells), self.cells)]
            else:
                parts += [feats[k] for k in sorted(feats)]
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)

    def log_probs(self, inputs, params=None):
        """Log-probabilities, shape (n, C) or (n, cells, C) for per-cell heads.

        Per-cell inputs arrive as one row per (sample, cell); the head is shared across cells.
        """
        z = ad.mul(ad.sub(inputs, self.in_mean), self.in_scale)
        logits = dense_graph(z, self.params if params is None else params)
        if self.head == "per_cell":
            logits = logits.reshape((logits.shape[0] // self.cells, self.cells, self.num_classes))
        return ad.log_softmax(logits, axis=-1)

    def predict_log_proba(self, m, s, x0, noising_mode="deterministic_zero", seed: int = 0) -> np.ndarray:
        return self.log_probs(self.embed(m, s, np.asarray(x0, np.float64), noising_mode, seed=seed)).value

    def predict_proba(self, m, s, x0, noising_mode="deterministic_zero", seed: int = 0) -> np.ndarray:
        return np.exp(self.predict_log_proba(m, s, x0, noising_mode, seed))

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        header = {"kind": "guidance_classifier", "input_mode": self.input_mode, "head": self.head,
                  "num_classes": self.num_classes, "input_dim": self.input_dim, "hidden": self.hidden,
                  "t_feats": list(self.t_feats), "taps": list(self.taps),
                  "noising_mode": self.noising_mode, "cells": self.cells}
        tensors = {"in_mean": self.in_mean, "in_scale": self.in_scale}
        tensors.update({f"p{i}": p for i, p in enumerate(self.params)})
        checkpoint.write(path, header, tensors)

    @classmethod
    def load(cls, path) -> "GuidanceClassifier":
        h, t = checkpoint.read(path)
        if h.get("kind") != "guidance_classifier":
            raise checkpoint.CheckpointError(f"{path}: not a classifier checkpoint")
        for key in ("input_mode", "t_feats", "taps", "noising_mode"):
            if key not in h:
                raise checkpoint.CheckpointError(f"{path}: missing metadata {key!r}")
        params = [t[f"p{i}"] for i in range(len(t) - 2)]
        return cls(h["input_mode"], h["head"], h["num_classes"], h["input_dim"], h["hidden"],
                   tuple(h["t_feats"]), tuple(h["taps"]), h["noising_mode"], h["cells"], params,
                   t["in_mean"], t["in_scale"])


def _cell_readout(m: MlpDenoiser, feats: dict, cells: int):
    """Last hidden layer projected onto each cell through the denoiser's own output weights.

    This is the denoiser's noise prediction minus its output bias: one number per cell,
    which keeps a 20-example per-cell head from memorising a wide per-cell slice.
    """
    last = len(m.hidden) - 1
    if last not in feats:
        raise ValueError(f"per-cell features need the last hidden layer ({last}) among the taps")
    if m.input_dim != cells:
        raise ValueError(f"denoiser has {m.input_dim} cells, classifier expects {cells}")
    return ad.matmul(feats[last], np.asarray(m.params[-2], np.float64))


_PATCH_CACHE: dict[int, np.ndarray] = {}


def _patch_index(cells: int) -> np.ndarray:
    """Indices of each cell's 3x3 neighbourhood on a square grid; ``cells`` marks padding."""
    if cells not in _PATCH_CACHE:
        side = math.isqrt(cells)
        if side * side != cells:
            raise ValueError(f"per-cell raw input needs a square grid, got {cells} cells")
        r, c = np.divmod(np.arange(cells), side)
        cols = []
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                rr, cc = r + dr, c + dc
                ok = (rr >= 0) & (rr < side) & (cc >= 0) & (cc < side)
                cols.append(np.where(ok, rr * side + cc, cells))
        _PATCH_CACHE[cells] = np.stack(cols, axis=1)
    return _PATCH_CACHE[cells]


def _cell_patches(flat, cells: int):
    n = flat.shape[0]
    padded = ad.concat([flat, np.zeros((n, 1))], axis=1)
    return ad.getitem(padded, (slice(None), _patch_index(cells))).reshape((n * cells, 9))


def train_classifier(m: MlpDenoiser | None, s: NoiseSchedule, x, y, *, input_mode: str = "feature_bundle",
                     head: str = "dense", t_feats: Sequence[int] = (), taps=(1, 2),
                     noising_mode: str = "fresh", num_classes: int | None = None, steps: int = 100,
                     seed: int = 0, lr: float = 0.1, hidden: int = 64, batch_size: int | None = None,
                     optimizer: str = "sgd") -> GuidanceClassifier:
    """Cross-entropy training on clean examples; features re-noised per ``noising_mode`` each step."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0 or len(x) != len(y):
        raise ValueError("need a non-empty set of labelled examples")
    num_classes = int(y.max()) + 1 if num_classes is None else num_classes
    present = np.unique(y)
    if head == "dense" and len(present) < num_classes:
        missing = sorted(set(range(num_classes)) - set(present.tolist()))
        raise ValueError(f"classes {missing} have no examples")
    if input_mode == "feature_bundle" and not t_feats:
        raise ValueError("feature-bundle classifier needs at least one feature timestep")
    rng = np.random.default_rng(seed)
    cells = int(np.prod(y.shape[1:])) if head == "per_cell" else 1
    clf = GuidanceClassifier(input_mode, head, num_classes, 0, hidden, tuple(t_feats), tuple(taps),
                             noising_mode, cells)
    # input standardisation is fixed from one embedding pass of the training set
    first = clf.embed(m, s, x, noising_mode, seed=seed, rng=rng).value
    clf.input_dim = first.shape[1]
    clf.in_mean = first.mean(axis=0).astype(np.float32)
    clf.in_scale = (1.0 / (first.std(axis=0) + 1e-3)).astype(np.float32)
    clf.params = init_dense([clf.input_dim, hidden, clf.out_dim], rng)
    opt = make_optimizer(optimizer, clf.params, lr)
    targets = y.reshape(len(y), -1) if head == "per_cell" else y
    for step in range(steps):
        idx = np.arange(len(x)) if batch_size is None else rng.integers(0, len(x), batch_size)
        inputs = clf.embed(m, s, x[idx], noising_mode, seed=seed + 7919 * (step + 1), rng=rng).value
        pv = [ad.Var(p, requires_grad=True) for p in clf.params]
        loss = cross_entropy(clf.log_probs(inputs, pv), targets[idx])
        ad.backward(loss)
        opt.step([v.grad for v in pv])
    return clf


def train_few_shot(m: MlpDenoiser, x, y, gcfg: GuidanceConfig, steps: int = 100, seed: int = 0,
                   s: NoiseSchedule | None = None, **kw) -> GuidanceClassifier:
    s = s or m.schedule()
    t_feat = gcfg.t_feat or default_t_feat(s.T)
    head = "per_cell" if np.ndim(y) > 1 else "dense"
    return train_classifier(m, s, x, y, t_feats=(t_feat,), taps=gcfg.taps, noising_mode=gcfg.noising_mode,
                            head=head, steps=steps, seed=seed, **kw)


def train_clean_classifier(x, y, steps: int = 100, seed: int = 0, s: NoiseSchedule | None = None,
                           **kw) -> GuidanceClassifier:
    """The clean-image baseline: same head, trained on raw inputs."""
    head = "per_cell" if np.ndim(y) > 1 else "dense"
    return train_classifier(None, s, x, y, input_mode="raw_x0", head=head, steps=steps, seed=seed, **kw)


# ---------------------------------------------------------------------------
# Guidance


def _target_log_likelihood(clf: GuidanceClassifier, lp, target):
    n = lp.shape[0]
    if clf.head == "per_cell":
        tgt = np.broadcast_to(np.asarray(target).reshape(-1, clf.cells) if np.ndim(target) > 1
                              else np.asarray(target).reshape(1, clf.cells), (n, clf.cells))
        return ad.vmean(ad.take_along_last(lp, tgt), axis=1)
    return ad.take_along_last(lp, np.broadcast_to(np.asarray(target), (n,)))


def guidance_gradient(m: MlpDenoiser, clf: GuidanceClassifier, s: NoiseSchedule, x_t, t: int, target,
                      clamp: tuple[float, float] | None = None) -> np.ndarray:
    """∇_{x_t} log p(target | x̂₀(x_t)) per sample, through the denoiser and the classifier."""
    if not getattr(m, "supports_input_gradient", False):
        raise TypeError(f"{type(m).__name__} does not support input gradients")

    def objective(xv):
        eps, _ = m.graph(xv, t)
        x0 = estimate_x0(s, xv, t, eps, clamp)
        lp = clf.log_probs(clf.embed(m, s, x0, "deterministic_zero"))
        return ad.vsum(_target_log_likelihood(clf, lp, target))

    g = ad.grad(objective, np.asarray(x_t, np.float64))
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(f"non-finite guidance gradient at t={t}")
    return g


def clean_image_guidance(m: MlpDenoiser, clf: GuidanceClassifier, s: NoiseSchedule, x_t, t: int, target,
                         clamp=None) -> np.ndarray:
    if clf.input_mode != "raw_x0":
        raise ValueError("clean-image guidance needs a raw_x0 classifier")
    return guidance_gradient(m, clf, s, x_t, t, target, clamp)


def apply_guidance(eps, grad, s: NoiseSchedule, t: int, lam: float) -> np.ndarray:
    if np.shape(eps) != np.shape(grad):
        raise ValueError(f"shape mismatch: {np.shape(eps)} vs {np.shape(grad)}")
    return np.asarray(eps, np.float64) - lam * math.sqrt(1.0 - float(s.alpha_bar(t))) * np.asarray(grad, np.float64)


def analytic_posterior_gradient(gmm: GmmSpec, s: NoiseSchedule, x_t, t: int, k: int) -> np.ndarray:
    """∇ log p(component k | x_t) = component-k score minus mixture score."""
    if not 0 <= k < gmm.K:
        raise ValueError(f"component {k} outside [0, {gmm.K})")
    return component_score(gmm, s, x_t, t, k) - gmm_score(gmm, s, x_t, t)


class ClassifierGuidance:
    """Sampling hook applying classifier guidance; ``target`` may hold one entry per chain."""

    def __init__(self, m: MlpDenoiser, clf: GuidanceClassifier, s: NoiseSchedule, target, lam: float,
                 clamp=None, per_chain: bool = False):
        self.m, self.clf, self.s = m, clf, s
        self.target = np.asarray(target)
        self.lam = lam
        self.clamp = clamp
        self.per_chain = per_chain

    def __call__(self, x_t, t, eps, chains=None):
        if self.lam == 0:
            return eps
        target = self.target[chains] if self.per_chain else self.target
        g = guidance_gradient(self.m, self.clf, self.s, x_t, t, target, self.clamp)
        return apply_guidance(eps, g, self.s, t, self.lam)


class AnalyticGuidance:
    def __init__(self, gmm: GmmSpec, s: NoiseSchedule, k: int, lam: float = 1.0):
        self.gmm, self.s, self.k, self.lam = gmm, s, k, lam

    def __call__(self, x_t, t, eps):
        g = analytic_posterior_gradient(self.gmm, self.s, x_t, t, self.k)
        return apply_guidance(eps, g, self.s, t, self.lam)


def rejection_filter(scores, threshold: float) -> tuple[np.ndarray, float]:
    """Keep samples whose intended-class probability reaches ``threshold``."""
    scores = np.asarray(scores, dtype=np.float64)
    if np.any(scores < 0) or np.any(scores > 1) or not np.all(np.isfinite(scores)):
        raise ValueError("scores must be probabilities in [0, 1]")
    keep = scores >= threshold
    rate = float(keep.mean()) if len(keep) else 0.0
    if len(keep) and rate == 0.0:
        warnings.warn(f"rejection filter at threshold {threshold} accepted no samples", RuntimeWarning)
    return keep, rate
