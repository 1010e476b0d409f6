"""Sample-quality metrics: Fréchet distance, CAS, mIoU and mixture class fidelity."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .denoiser import GmmSpec, responsibilities
from .nn import cross_entropy, dense_graph, init_dense
from .optim import Adam, step_decay

STABILIZER = 1e-6


@dataclass
class MomentSummary:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    @classmethod
    def from_samples(cls, x) -> "MomentSummary":
        x = np.asarray(x, dtype=np.float64)
        x = x.reshape(len(x), -1)
        return cls(x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False)), len(x))


def _sym_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(a: MomentSummary, b: MomentSummary) -> float:
    """Wasserstein-2 distance between the Gaussians fitted to two populations."""
    d = len(a.mean)
    if len(b.mean) != d:
        raise ValueError(f"dimension mismatch: {d} vs {len(b.mean)}")
    if min(a.n, b.n) < d + 1:
        raise ValueError(f"need at least {d + 1} samples per population, got {a.n} and {b.n}")
    ca = a.cov + STABILIZER * np.eye(d)
    cb = b.cov + STABILIZER * np.eye(d)
    ra = _sym_sqrt(ca)
    # tr (ca cb)^{1/2} = tr (ra cb ra)^{1/2}, and the latter is symmetric PSD
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(ra @ cb @ ra), 0, None)).sum()
    diff = a.mean - b.mean
    return max(float(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * cross), 0.0)


def miou(pred_masks, true_masks, num_classes: int) -> float:
    """Mean IoU over classes present in prediction or reference."""
    pred = np.asarray(pred_masks)
    true = np.asarray(true_masks)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
    for arr in (pred, true):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"labels outside [0, {num_classes})")
    ious = []
    for c in range(num_classes):
        p, t = pred == c, true == c
        union = np.count_nonzero(p | t)
        if union:
            ious.append(np.count_nonzero(p & t) / union)
    return float(np.mean(ious)) if ious else float("nan")


def class_fidelity(samples, gmm: GmmSpec, k: int) -> float:
    """Fraction of samples the Bayes rule under ``gmm`` assigns to component ``k``."""
    x = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    if x.shape[1] != gmm.dim:
        raise ValueError(f"sample dimension {x.shape[1]} does not match mixture dimension {gmm.dim}")
    return float(np.mean(responsibilities(gmm, x).argmax(axis=1) == k))


# ---------------------------------------------------------------------------
# fixed-architecture classifier shared by CAS and the oracle feature extractor


@dataclass
class ClassifierTrainConfig:
    """Training budget in epochs (steps scale with the dataset); ``steps`` overrides it when set."""
    epochs: int = 40
    steps: int | None = None
    batch_size: int = 64
    lr: float = 1e-3
    milestones: tuple[float, float] = (0.5, 0.75)
    hidden: tuple[int, int] = (128, 64)

    def num_steps(self, n: int) -> int:
        if self.steps is not None:
            return self.steps
        return max(1, math.ceil(self.epochs * n / self.batch_size))


@dataclass(eq=False)
class DenseClassifier:
    num_classes: int
    params: list[np.ndarray] = field(default_factory=list)
    seed: int = 0

    def _graph(self, x, params=None, return_hidden=False):
        x = np.asarray(x, dtype=np.float64)
        return dense_graph(x.reshape(len(x), -1), self.params if params is None else params, return_hidden)

    def logits(self, x) -> np.ndarray:
        return self._graph(x).value

    def predict(self, x) -> np.ndarray:
        return self.logits(x).argmax(axis=1)

    def predict_proba(self, x) -> np.ndarray:
        return np.exp(ad.log_softmax(self.logits(x)).value)

    def features(self, x) -> np.ndarray:
        """Penultimate activations, the fixed feature space for Fréchet distances."""
        return self._graph(x, return_hidden=True)[1].value

    def accuracy(self, x, y) -> float:
        return float(np.mean(self.predict(x) == np.asarray(y)))


def train_dense_classifier(x, y, num_classes: int, cfg: ClassifierTrainConfig | None = None,
                           seed: int = 0) -> DenseClassifier:
    cfg = cfg or ClassifierTrainConfig()
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    clf = DenseClassifier(num_classes, init_dense([x.shape[1], *cfg.hidden, num_classes], rng), seed)
    opt = Adam(clf.params, cfg.lr)
    steps = cfg.num_steps(len(x))
    lr_at = step_decay(cfg.lr, steps, cfg.milestones)
    for step in range(steps):
        idx = rng.integers(0, len(x), cfg.batch_size)
        pv = [ad.Var(p, requires_grad=True) for p in clf.params]
        loss = cross_entropy(ad.log_softmax(clf._graph(x[idx], pv)), y[idx])
        ad.backward(loss)
        opt.step([v.grad for v in pv], lr=lr_at(step))
    return clf


def train_oracle_classifier(ds, num_classes: int, seed: int = 0,
                            cfg: ClassifierTrainConfig | None = None) -> DenseClassifier:
    """Frozen reference classifier trained once on real data."""
    return train_dense_classifier(ds.x, ds.labels, num_classes, cfg, seed)


def cas(synthetic, real_val, num_classes: int | None = None, cfg: ClassifierTrainConfig | None = None,
        seed: int = 0) -> float:
    """Top-1 accuracy on real validation data of a classifier trained only on ``synthetic``."""
    if len(synthetic) == 0 or len(real_val) == 0:
        raise ValueError("CAS needs non-empty synthetic and validation sets")
    if num_classes is None:
        num_classes = int(max(synthetic.labels.max(), real_val.labels.max())) + 1
    clf = train_dense_classifier(synthetic.x, synthetic.labels, num_classes, cfg, seed)
    return clf.accuracy(real_val.x, real_val.labels)
