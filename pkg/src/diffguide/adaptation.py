"""Conditional fine-tuning, the dual-timestep rejection classifier and filtered synthetic datasets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .denoiser import MlpDenoiser, TrainConfig, train_denoiser
from .guidance import GuidanceClassifier, rejection_filter, train_classifier
from .samplers import SamplerConfig, sample_loop
from .schedule import NoiseSchedule


@dataclass
class FinetuneConfig:
    steps: int = 10_000
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 0
    label_dropout: float = 0.1
    optimizer: str = "adam"

    def __post_init__(self):
        if not 0.0 <= self.label_dropout < 1.0:
            raise ValueError("label dropout must be in [0, 1)")
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("need steps >= 0, batch_size >= 1 and lr > 0")


def finetune_conditional(uncond: MlpDenoiser, x, labels, s: NoiseSchedule, cfg: FinetuneConfig,
                         num_classes: int | None = None) -> MlpDenoiser:
    """Copy ``uncond``, attach a fresh label table and keep training with (dropped-out) labels."""
    if uncond.label_table is not None:
        raise ValueError("model is already conditional")
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0 or len(labels) != len(x):
        raise ValueError("need a non-empty labelled dataset")
    if np.any(labels < 0):
        raise ValueError("fine-tuning data must be fully labelled")
    num_classes = int(labels.max()) + 1 if num_classes is None else num_classes
    cond = uncond.clone()
    cond.attach_label_table(num_classes, seed=cfg.seed)
    if cfg.steps:
        tc = TrainConfig(steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed,
                         optimizer=cfg.optimizer)
        train_denoiser(cond, x, s, tc, labels=labels, label_dropout=cfg.label_dropout)
    return cond


def default_t_pair(T: int) -> tuple[int, int]:
    return max(1, round(0.3 * T)), max(1, round(0.8 * T))


def train_rejection_classifier(uncond: MlpDenoiser, x, y, t_pair=None, steps: int = 300, seed: int = 0,
                               s: NoiseSchedule | None = None, **kw) -> GuidanceClassifier:
    """Classifier on unconditional-denoiser features taken at two timesteps and concatenated."""
    s = s or uncond.schedule()
    t_pair = default_t_pair(s.T) if t_pair is None else tuple(int(t) for t in t_pair)
    if len(t_pair) != 2 or t_pair[0] == t_pair[1]:
        raise ValueError(f"rejection classifier needs two distinct timesteps, got {t_pair}")
    kw.setdefault("noising_mode", "fresh")
    return train_classifier(uncond, s, x, y, t_feats=t_pair, steps=steps, seed=seed, **kw)


@dataclass
class AugmentPlan:
    counts: dict[int, int]
    cfg_weight: float = 0.0
    threshold: float = 0.2
    max_attempts_per_sample: int = 20
    seed: int = 0

    def __post_init__(self):
        self.counts = {int(k): int(v) for k, v in self.counts.items()}
        if any(v < 0 for v in self.counts.values()):
            raise ValueError("per-class counts must be >= 0")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must be in [0, 1]")
        if self.max_attempts_per_sample < 1:
            raise ValueError("attempt budget must be >= 1 per sample")


@dataclass
class ClassReport:
    target: int
    accepted: int = 0
    attempted: int = 0
    rejected: int = 0
    shortfall: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.attempted if self.attempted else 0.0

    def to_dict(self) -> dict:
        return {"target": self.target, "accepted": self.accepted, "attempted": self.attempted,
                "rejected": self.rejected, "acceptance_rate": self.acceptance_rate,
                "shortfall": self.shortfall}


@dataclass
class GenerationReport:
    classes: dict[int, ClassReport] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return all(r.shortfall == 0 for r in self.classes.values())

    def to_dict(self) -> dict:
        return {str(k): r.to_dict() for k, r in sorted(self.classes.items())}

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


def _round_seed(seed: int, cls: int, rnd: int) -> int:
    return (seed * 1_000_003 + cls * 10_007 + rnd) % (2**63)


def rejection_scores(rej: GuidanceClassifier, m: MlpDenoiser, s: NoiseSchedule, x, cls, seed: int = 0):
    """Probability of the intended class, with features noised from a fixed seed."""
    p = rej.predict_proba(m, s, x, noising_mode="fixed_seed", seed=seed)
    return p[np.arange(len(x)), np.broadcast_to(np.asarray(cls), (len(x),))]


def augment_dataset(cond: MlpDenoiser, rej: GuidanceClassifier | None, s: NoiseSchedule,
                    sampler: SamplerConfig, plan: AugmentPlan,
                    feature_model: MlpDenoiser | None = None) -> tuple[Dataset, GenerationReport]:
    """Sample each class with classifier-free guidance and keep what the rejection filter accepts.

    ``rej=None`` keeps every sample. Features for the filter come from ``feature_model``
    (the unconditional denoiser the filter was trained on), defaulting to ``cond``'s null path.
    Budget exhaustion returns a partial dataset; the report flags the shortfall.
    """
    if cond.label_table is None:
        raise ValueError("augmentation needs a conditional model")
    feature_model = feature_model or cond
    report = GenerationReport()
    xs, ys = [], []
    for cls in sorted(plan.counts):
        target = plan.counts[cls]
        rep = ClassReport(target)
        report.classes[cls] = rep
        budget = target * plan.max_attempts_per_sample
        kept: list[np.ndarray] = []
        rnd = 0
        while rep.accepted < target and rep.attempted < budget:
            n = min(budget - rep.attempted, max(target - rep.accepted, 1) * 2 if rnd else target - rep.accepted)
            cfg = replace(sampler, chains=n, seed=_round_seed(plan.seed, cls, rnd), cfg_weight=plan.cfg_weight,
                          record_trace=False)
            x, _ = sample_loop(cond, s, cfg, label=cls)
            if rej is None or plan.threshold == 0.0:
                keep = np.ones(n, bool)
            else:
                scores = rejection_scores(rej, feature_model, s, x, cls, seed=cfg.seed)
                keep, _ = rejection_filter(scores, plan.threshold)
            # chains are examined in index order; those after the one that fills the target
            # were generated but never examined, so they count as neither accepted nor rejected
            need = target - rep.accepted
            hits = np.flatnonzero(keep)
            examined = n if len(hits) < need else int(hits[need - 1]) + 1
            kept.append(x[hits[:need]])
            rep.attempted += examined
            rep.accepted += min(len(hits), need)
            rnd += 1
        rep.rejected = rep.attempted - rep.accepted
        rep.shortfall = target - rep.accepted
        if kept:
            xs.append(np.concatenate(kept))
            ys.append(np.full(rep.accepted, cls, dtype=np.int64))
    if not xs or sum(len(a) for a in xs) == 0:
        shape = tuple(cond.data_shape)
        return Dataset(np.zeros((0, *shape), np.float32), np.zeros(0, np.int64)), report
    return Dataset(np.concatenate(xs), np.concatenate(ys)), report
