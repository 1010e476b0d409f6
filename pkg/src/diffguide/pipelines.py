"""Config-driven experiment pipelines.

An :class:`ExperimentConfig` names one pipeline; :func:`run_experiment` runs it once per
seed, writes artifacts under ``output_dir/seed<k>/``, a ``metrics.csv`` with the fixed
row schema and a ``manifest.json`` with artifact checksums.

Trained models are memoised in-process, keyed by the config blocks that determine them,
so configs sharing schedule/model/dataset blocks (e.g. augment and sweep) train once.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from pathlib import Path
from typing import Annotated, Callable, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationInfo, field_validator, model_validator

from . import __version__
from .adaptation import AugmentPlan, FinetuneConfig, augment_dataset, finetune_conditional, rejection_scores, \
    train_rejection_classifier
from .data import Dataset, GridMaskSpec, gen_gmm_dataset, gen_gridmask_dataset, load_dataset, oracle_segment, \
    save_dataset, split
from .denoiser import GmmSpec, MlpDenoiser, TrainConfig, train_denoiser
from .evaluation import ClassifierTrainConfig, MomentSummary, cas, class_fidelity, frechet_distance, miou
from .guidance import ClassifierGuidance, GuidanceConfig, rejection_filter, train_clean_classifier, train_few_shot
from .samplers import SamplerConfig, sample_loop, save_samples
from .schedule import build_schedule

# seed offsets for draws that must not overlap the training pool
FEW_SHOT_OFFSET = 1000
TARGET_OFFSET = 2000
VAL_OFFSET = 50_000

CSV_FIELDS = ("run_id", "metric", "value", "n", "seed", "config_hash")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# schema


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _resolve(v: str | None, info: ValidationInfo) -> str | None:
    if v is None:
        return None
    p = Path(v)
    base = (info.context or {}).get("base")
    if not p.is_absolute() and base is not None:
        p = Path(base) / p
    if not p.exists():
        raise ValueError(f"path does not exist: {p}")
    return str(p)


class ScheduleBlock(_Strict):
    kind: Literal["linear", "cosine"] = "linear"
    T: int = Field(1000, ge=1)
    beta_start: float = 1e-4
    beta_end: float = 0.02
    s: float = 0.008

    def build(self):
        return build_schedule(self.kind, self.T, self.beta_start, self.beta_end, self.s)


class TrainBlock(_Strict):
    steps: int = Field(5000, ge=0)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0)
    optimizer: Literal["adam", "sgd"] = "adam"
    weighting: Literal["uniform", "min_snr"] = "uniform"


class ModelBlock(_Strict):
    hidden: tuple[int, ...] = (128, 128, 128)
    time_dim: int = Field(32, ge=2)
    taps: tuple[int, ...] = (1, 2)  # hidden layers whose activations serve as features
    checkpoint: str | None = None
    train: TrainBlock = TrainBlock()

    _paths = field_validator("checkpoint")(_resolve)

    @model_validator(mode="after")
    def _taps_exist(self):
        if self.checkpoint is None and any(not 0 <= k < len(self.hidden) for k in self.taps):
            raise ValueError(f"taps {list(self.taps)} must index the {len(self.hidden)} hidden layers")
        return self


class GmmBlock(_Strict):
    weights: list[float]
    means: list[list[float]]
    variances: list[list[float]]

    def build(self) -> GmmSpec:
        return GmmSpec(self.weights, self.means, self.variances)


_GRID = GridMaskSpec()


class GridBlock(_Strict):
    size: int = _GRID.size
    background: tuple[float, float] = _GRID.background
    bands: tuple[tuple[float, float], ...] = _GRID.bands
    min_side: int = _GRID.min_side
    max_side: int = _GRID.max_side
    noise_level: float = _GRID.noise_level

    def build(self) -> GridMaskSpec:
        return GridMaskSpec(self.size, self.background, self.bands, self.min_side, self.max_side, self.noise_level)


class DatasetBlock(_Strict):
    kind: Literal["gmm", "gridmask", "path"]
    n: int | None = Field(None, ge=1)
    gmm: GmmBlock | None = None
    grid: GridBlock | None = None
    path: str | None = None
    labelled_fraction: float = Field(1.0, gt=0.0, le=1.0)
    val_n: int = Field(2000, ge=1)
    # the denoiser sees scale * x + shift; metrics are computed back in data space
    model_scale: float = 1.0
    model_shift: float = 0.0

    _paths = field_validator("path")(_resolve)

    @model_validator(mode="after")
    def _complete(self):
        if self.kind == "gmm" and (self.gmm is None or self.n is None):
            raise ValueError("dataset.kind='gmm' needs 'gmm' and 'n'")
        if self.kind == "gridmask" and self.n is None:
            raise ValueError("dataset.kind='gridmask' needs 'n'")
        if self.kind == "path" and self.path is None:
            raise ValueError("dataset.kind='path' needs 'path'")
        if self.model_scale == 0:
            raise ValueError("dataset.model_scale must be non-zero")
        return self

    @property
    def generated(self) -> bool:
        return self.kind != "path"


class SamplerBlock(_Strict):
    method: Literal["ddpm", "ddim"] = "ddim"
    num_steps: int | None = Field(None, ge=1)
    eta: float = Field(0.0, ge=0.0, le=1.0)
    sigma_variant: Literal["posterior", "beta"] = "posterior"
    clamp: tuple[float, float] | None = None
    chains: int = Field(1000, ge=1)

    def build(self, seed: int, **kw) -> SamplerConfig:
        args = dict(method=self.method, num_steps=self.num_steps, eta=self.eta, sigma_variant=self.sigma_variant,
                    seed=seed, chains=self.chains, clamp=self.clamp)
        args.update(kw)
        return SamplerConfig(**args)


class ClassifierBlock(_Strict):
    steps: int = Field(100, ge=1)
    lr: float = Field(0.1, gt=0)
    optimizer: Literal["sgd", "adam"] = "sgd"
    hidden: int = Field(64, ge=1)


class FinetuneBlock(_Strict):
    steps: int = Field(10_000, ge=0)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-4, gt=0)
    label_dropout: float = Field(0.1, ge=0.0, lt=1.0)
    optimizer: Literal["adam", "sgd"] = "adam"


class RejectionBlock(_Strict):
    t_pair: tuple[int, int] | None = None
    steps: int = Field(300, ge=1)
    lr: float = Field(1e-2, gt=0)
    optimizer: Literal["sgd", "adam"] = "adam"
    hidden: int = Field(64, ge=1)

    @field_validator("t_pair")
    @classmethod
    def _distinct(cls, v):
        if v is not None and v[0] == v[1]:
            raise ValueError("rejection timesteps must differ")
        return v


class CasBlock(_Strict):
    epochs: int = Field(40, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0)
    hidden: tuple[int, int] = (128, 64)

    def build(self) -> ClassifierTrainConfig:
        return ClassifierTrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, hidden=self.hidden)


class TrainPipeline(_Strict):
    name: Literal["train"]


class FinetunePipeline(_Strict):
    name: Literal["finetune"]
    finetune: FinetuneBlock = FinetuneBlock()
    sampler: SamplerBlock = SamplerBlock(num_steps=50, chains=500)


class GuidePipeline(_Strict):
    name: Literal["guide"]
    task: Literal["attribute", "mask"]
    target: int = 1
    few_shot: int = Field(50, ge=1)  # per class for attributes, labelled pairs for masks
    lam: float = Field(1.0, ge=0.0)
    t_feat: int | None = None
    taps: tuple[int, ...] = (1, 2)
    noising_mode: Literal["fresh", "fixed_seed", "deterministic_zero"] = "fresh"
    guidance_clamp: tuple[float, float] | None = None
    classifier: ClassifierBlock = ClassifierBlock()
    sampler: SamplerBlock = SamplerBlock()
    num_steps: tuple[int, ...] = (100,)
    baseline_clean: bool = True
    reference_n: int = Field(5000, ge=2)


class RejectPipeline(_Strict):
    name: Literal["reject"]
    target: int = 0
    threshold: float = Field(0.2, ge=0.0, le=1.0)
    rejection: RejectionBlock = RejectionBlock()
    sampler: SamplerBlock = SamplerBlock(num_steps=50)


class _Generation(_Strict):
    finetune: FinetuneBlock = FinetuneBlock()
    rejection: RejectionBlock = RejectionBlock()
    cfg_weight: float = 0.01
    threshold: float = Field(0.2, ge=0.0, le=1.0)
    per_class: int | None = Field(None, ge=0)  # default: labelled records per class
    max_attempts_per_sample: int = Field(20, ge=1)
    sampler: SamplerBlock = SamplerBlock(num_steps=50, eta=1.0)
    cas: CasBlock = CasBlock()


class AugmentPipeline(_Generation):
    name: Literal["augment"]
    baselines: bool = True


class SweepPipeline(_Generation):
    name: Literal["sweep"]
    multipliers: tuple[int, ...] = (0, 1, 2, 3)

    @field_validator("multipliers")
    @classmethod
    def _nonneg(cls, v):
        if not v or min(v) < 0:
            raise ValueError("multipliers must be a non-empty list of non-negative integers")
        return v


class EvaluatePipeline(_Strict):
    name: Literal["evaluate"]
    reference: str
    candidate: str
    metrics: tuple[Literal["frechet", "cas", "miou"], ...] = ("frechet",)
    num_classes: int | None = None
    cas: CasBlock = CasBlock()

    _paths = field_validator("reference", "candidate")(_resolve)


Pipeline = Annotated[Union[TrainPipeline, FinetunePipeline, GuidePipeline, RejectPipeline, AugmentPipeline,
                           SweepPipeline, EvaluatePipeline], Field(discriminator="name")]


class ExperimentConfig(_Strict):
    name: str
    schedule: ScheduleBlock = ScheduleBlock()
    model: ModelBlock = ModelBlock()
    dataset: DatasetBlock | None = None
    pipeline: Pipeline
    seeds: tuple[int, ...] = (0,)
    output_dir: str

    @model_validator(mode="after")
    def _consistent(self):
        p, d = self.pipeline, self.dataset
        if p.name != "evaluate" and d is None:
            raise ValueError(f"pipeline '{p.name}' needs a dataset block")
        if p.name in ("guide", "reject", "augment", "sweep") and not d.generated:
            raise ValueError(f"pipeline '{p.name}' needs a generated dataset (its oracles come from the generator)")
        if p.name == "guide":
            want = "gmm" if p.task == "attribute" else "gridmask"
            if d.kind != want:
                raise ValueError(f"guide task '{p.task}' needs dataset.kind='{want}'")
        if p.name == "guide" and self.model.checkpoint is None and not set(p.taps) <= set(self.model.taps):
            raise ValueError(f"pipeline.taps {list(p.taps)} are not among model.taps {list(self.model.taps)}")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        return self

    def config_hash(self) -> str:
        return _hash(self.model_dump(mode="json"))


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    """Parse a JSON config; relative paths resolve against the config's directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse_config(text, base=path.parent)


def parse_config(text: str, base=None) -> ExperimentConfig:
    from pydantic import ValidationError

    try:
        return ExperimentConfig.model_validate_json(text, context={"base": base})
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = ".".join(str(p) for p in first["loc"]) or "<root>"
        raise ConfigError(f"{loc}: {first['msg']} ({exc.error_count()} error(s))") from None


# ---------------------------------------------------------------------------
# shared stages


_CACHE: dict[str, object] = {}


def clear_cache() -> None:
    _CACHE.clear()


def _memo(key_obj, build: Callable):
    key = _hash(key_obj)
    if key not in _CACHE:
        _CACHE[key] = build()
    return _CACHE[key]


class Stage:
    """Per-(config, seed) access to the dataset, schedule and trained models."""

    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.cfg, self.seed = cfg, seed
        self.s = cfg.schedule.build()
        d = cfg.dataset
        self.d = d
        self._key = {"schedule": cfg.schedule.model_dump(mode="json"), "model": cfg.model.model_dump(mode="json"),
                     "dataset": None if d is None else d.model_dump(mode="json"), "seed": seed}

    # -- data ---------------------------------------------------------------

    def to_model(self, x) -> np.ndarray:
        return np.asarray(x, np.float64) * self.d.model_scale + self.d.model_shift

    def to_data(self, x) -> np.ndarray:
        return (np.asarray(x, np.float64) - self.d.model_shift) / self.d.model_scale

    @property
    def gmm(self) -> GmmSpec:
        return self.d.gmm.build()

    @property
    def grid(self) -> GridMaskSpec:
        return (self.d.grid or GridBlock()).build()

    @property
    def num_classes(self) -> int:
        if self.d.kind == "gmm":
            return self.gmm.K
        if self.d.kind == "gridmask":
            return self.grid.num_classes
        labels = self.pool().labels
        return int(labels.max()) + 1

    def draw(self, n: int, seed: int) -> Dataset:
        if self.d.kind == "gmm":
            return gen_gmm_dataset(self.gmm, n, seed)
        if self.d.kind == "gridmask":
            return gen_gridmask_dataset(self.grid, n, seed)
        raise ConfigError("this pipeline needs a generated dataset")

    def pool(self) -> Dataset:
        if self.d.kind == "path":
            return _memo({"pool": self.d.path}, lambda: load_dataset(self.d.path))
        return _memo({**self._key, "pool": True}, lambda: self.draw(self.d.n, self.seed))

    def labelled(self) -> Dataset:
        pool = self.pool()
        f = self.d.labelled_fraction
        part = pool if f >= 1.0 else split(pool, (f, 1.0 - f), self.seed)[0]
        part = part.labelled()
        if len(part) == 0:
            raise ValueError("the labelled subset is empty")
        return part

    def validation(self) -> Dataset:
        return _memo({**self._key, "val": True}, lambda: self.draw(self.d.val_n, self.seed + VAL_OFFSET))

    # -- models ---------------------------------------------------------------

    def denoiser(self) -> MlpDenoiser:
        mb = self.cfg.model
        if mb.checkpoint is not None:
            return _memo({"ckpt": mb.checkpoint}, lambda: MlpDenoiser.load(mb.checkpoint))

        def build():
            pool = self.pool()
            m = MlpDenoiser.init(pool.sample_shape, self.s.T, hidden=mb.hidden, time_dim=mb.time_dim, taps=mb.taps,
                                 seed=self.seed, schedule_ref=self.s.to_config())
            tb = mb.train
            tc = TrainConfig(steps=tb.steps, batch_size=tb.batch_size, lr=tb.lr, seed=self.seed,
                             weighting=tb.weighting, optimizer=tb.optimizer)
            m.loss_curve = train_denoiser(m, self.to_model(pool.x), self.s, tc)
            return m

        return _memo({**self._key, "denoiser": True}, build)

    def conditional(self, fb: FinetuneBlock) -> MlpDenoiser:
        def build():
            real = self.labelled()
            fc = FinetuneConfig(steps=fb.steps, batch_size=fb.batch_size, lr=fb.lr, seed=self.seed,
                                label_dropout=fb.label_dropout, optimizer=fb.optimizer)
            return finetune_conditional(self.denoiser(), self.to_model(real.x), real.labels, self.s, fc,
                                        num_classes=self.num_classes)

        return _memo({**self._key, "finetune": fb.model_dump(mode="json")}, build)

    def rejection(self, rb: RejectionBlock):
        def build():
            real = self.labelled()
            return train_rejection_classifier(self.denoiser(), self.to_model(real.x), real.labels, rb.t_pair,
                                              steps=rb.steps, seed=self.seed, s=self.s, lr=rb.lr,
                                              optimizer=rb.optimizer, hidden=rb.hidden,
                                              num_classes=self.num_classes)

        return _memo({**self._key, "rejection": rb.model_dump(mode="json")}, build)


class Rows:
    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.run_id = f"{cfg.name}-seed{seed}"
        self.seed = seed
        self.config_hash = cfg.config_hash()
        self.rows: list[dict] = []

    def add(self, metric: str, value: float, n: int) -> None:
        self.rows.append({"run_id": self.run_id, "metric": metric, "value": float(value), "n": int(n),
                          "seed": self.seed, "config_hash": self.config_hash})


# ---------------------------------------------------------------------------
# pipelines


def run_train(cfg: ExperimentConfig, seed: int, out: Path) -> list[dict]:
    st = Stage(cfg, seed)
    m = st.denoiser()
    m.save(out / "denoiser.ckpt")
    rows = Rows(cfg, seed)
    curve = getattr(m, "loss_curve", None)
    if curve:
        tail = curve[-min(len(curve), 200):]
        rows.add("train/loss_tail_mean", np.mean(tail), len(tail))
    return rows.rows


def run_finetune(cfg: ExperimentConfig, seed: int, out: Path) -> list[dict]:
    p: FinetunePipeline = cfg.pipeline
    st = Stage(cfg, seed)
    cond = st.conditional(p.finetune)
    cond.save(out / "conditional.ckpt")
    rows = Rows(cfg, seed)
    rows.add("finetune/labelled_records", len(st.labelled()), len(st.labelled()))
    sc = p.sampler.build(seed)
    for k in range(st.num_classes):
        x, _ = sample_loop(cond, st.s, sc, label=k)
        save_samples(out / f"samples_class{k}.dtns", st.to_data(x), sc, st.s)
        if st.d.kind == "gmm":
            rows.add(f"finetune/class_fidelity/{k}", class_fidelity(st.to_data(x), st.gmm, k), len(x))
    return rows.rows


def _few_shot_attribute(st: Stage, per_class: int) -> tuple[np.ndarray, np.ndarray]:
    """The first ``per_class`` records of each class in the training pool keep their labels."""
    pool = st.pool()
    idx = []
    for k in range(st.gmm.K):
        hit = np.flatnonzero(pool.labels == k)[:per_class]
        if len(hit) < per_class:
            raise ValueError(f"the pool holds fewer than {per_class} examples of class {k}")
        idx.append(hit)
    idx = np.concatenate(idx)
    return pool.x[idx], pool.labels[idx]


def run_guide(cfg: ExperimentConfig, seed: int, out: Path) -> list[dict]:
    p: GuidePipeline = cfg.pipeline
    st = Stage(cfg, seed)
    m = st.denoiser()
    rows = Rows(cfg, seed)
    gcfg = GuidanceConfig(lam=p.lam, t_feat=p.t_feat, taps=p.taps, noising_mode=p.noising_mode)
    if p.task == "attribute":
        num_classes = st.gmm.K
    else:
        num_classes = st.grid.num_classes + 1  # background is mask id 0
    ckw = dict(lr=p.classifier.lr, optimizer=p.classifier.optimizer, hidden=p.classifier.hidden,
               num_classes=num_classes)
    if p.task == "attribute":
        fx, fy = _few_shot_attribute(st, p.few_shot)
        target, per_chain = p.target, False
        if not 0 <= target < st.gmm.K:
            raise ValueError(f"target {target} outside the mixture's {st.gmm.K} components")
    else:
        few = st.draw(p.few_shot, seed + FEW_SHOT_OFFSET)
        fx, fy = few.x, few.masks
        target, per_chain = st.draw(p.sampler.chains, seed + TARGET_OFFSET).masks, True
    clfs = {"feature": train_few_shot(m, st.to_model(fx), fy, gcfg, steps=p.classifier.steps, seed=seed,
                                      s=st.s, **ckw)}
    if p.baseline_clean:
        clfs["clean"] = train_clean_classifier(st.to_model(fx), fy, steps=p.classifier.steps, seed=seed, s=st.s,
                                               **ckw)
    ref = None
    if p.task == "attribute":
        ref_x, _ = st.gmm.component(target).sample(p.reference_n, np.random.default_rng(seed + TARGET_OFFSET))
        ref = MomentSummary.from_samples(ref_x)
    for variant, clf in clfs.items():
        clf.save(out / f"classifier_{variant}.ckpt")
        hook = ClassifierGuidance(m, clf, st.s, target, p.lam, clamp=p.guidance_clamp, per_chain=per_chain)
        for n_steps in p.num_steps:
            sc = p.sampler.build(seed, num_steps=n_steps)
            x, _ = sample_loop(m, st.s, sc, hook)
            x = st.to_data(x)
            save_samples(out / f"samples_{variant}_{n_steps}.dtns", x, sc, st.s)
            tag = f"{variant}@{n_steps}"
            if p.task == "attribute":
                rows.add(f"guide/{tag}/class_fidelity", class_fidelity(x, st.gmm, target), len(x))
                rows.add(f"guide/{tag}/frechet", frechet_distance(MomentSummary.from_samples(x), ref), len(x))
            else:
                seg = oracle_segment(x, st.grid)
                rows.add(f"guide/{tag}/miou", miou(seg, target, st.grid.num_classes + 1), len(x))
    return rows.rows


def run_reject(cfg: ExperimentConfig, seed: int, out: Path) -> list[dict]:
    p: RejectPipeline = cfg.pipeline
    st = Stage(cfg, seed)
    m = st.denoiser()
    rej = st.rejection(p.rejection)
    rej.save(out / "rejection.ckpt")
    rows = Rows(cfg, seed)
    val = st.validation()
    pred = rej.predict_proba(m, st.s, st.to_model(val.x), noising_mode="fixed_seed", seed=seed).argmax(1)
    rows.add("reject/classifier_val_accuracy", np.mean(pred == val.labels), len(val))
    sc = p.sampler.build(seed)
    x, _ = sample_loop(m, st.s, sc)
    scores = rejection_scores(rej, m, st.s, x, p.target, seed=seed)
    keep, rate = rejection_filter(scores, p.threshold)
    rows.add("reject/acceptance_rate", rate, len(x))
    xd = st.to_data(x)
    save_samples(out / "accepted.dtns", xd[keep] if keep.any() else xd[:0], sc, st.s)
    return rows.rows


def _per_class(st: Stage, p: _Generation) -> int:
    if p.per_class is not None:
        return p.per_class
    return max(1, len(st.labelled()) // st.num_classes)


def _generate(st: Stage, p: _Generation, cfg_weight: float, threshold: float, per_class: int, seed: int):
    cond = st.conditional(p.finetune)
    rej = st.rejection(p.rejection) if threshold > 0 else None
    plan = AugmentPlan({k: per_class for k in range(st.num_classes)}, cfg_weight=cfg_weight, threshold=threshold,
                       max_attempts_per_sample=p.max_attempts_per_sample, seed=seed)
    ds, report = augment_dataset(cond, rej, st.s, p.sampler.build(seed), plan, feature_model=st.denoiser())
    return Dataset(st.to_data(ds.x), ds.labels), report


def run_augment(cfg: ExperimentConfig, seed: int, out: Path) -> list[dict]:
    p: AugmentPipeline = cfg.pipeline
    st = Stage(cfg, seed)
    rows = Rows(cfg, seed)
    val, real, per = st.validation(), st.labelled(), _per_class(st, p)
    cas_cfg, C = p.cas.build(), st.num_classes
    filtered, report = _generate(st, p, p.cfg_weight, p.threshold, per, seed)
    save_dataset(filtered, out / "synthetic")
    report.save(out / "generation_report.json")
    rates = [r.acceptance_rate for r in report.classes.values() if r.attempted]
    rows.add("augment/acceptance_rate", np.mean(rates) if rates else 0.0, sum(r.attempted for r in report.classes.values()))
    rows.add("augment/shortfall", sum(r.shortfall for r in report.classes.values()), len(filtered))
    rows.add("cas/filtered", cas(filtered, val, C, cas_cfg, seed), len(filtered))
    if p.baselines:
        rows.add("cas/real_only", cas(real, val, C, cas_cfg, seed), len(real))
        for name, w in (("finetune", 0.0), ("cfg", p.cfg_weight)):
            ds, _ = _generate(st, p, w, 0.0, per, seed)
            rows.add(f"cas/{name}", cas(ds, val, C, cas_cfg, seed), len(ds))
    return rows.rows


def run_sweep(cfg: ExperimentConfig, seed: int, out: Path) -> list[dict]:
    p: SweepPipeline = cfg.pipeline
    st = Stage(cfg, seed)
    rows = Rows(cfg, seed)
    val, real, per = st.validation(), st.labelled(), _per_class(st, p)
    top = max(p.multipliers)
    synth = None
    if top > 0:
        synth, report = _generate(st, p, p.cfg_weight, p.threshold, top * len(real) // st.num_classes or per,
                                  seed + 1)
        save_dataset(synth, out / "synthetic")
        report.save(out / "generation_report.json")
    for mult in p.multipliers:
        train = real
        if mult > 0:
            k = mult * len(real)
            # equal share per class, in generation order
            idx = np.concatenate([np.flatnonzero(synth.labels == c)[: k // st.num_classes]
                                  for c in range(st.num_classes)])
            train = Dataset.concat([real, synth.subset(idx)])
        rows.add(f"sweep/accuracy@{mult}x", cas(train, val, st.num_classes, p.cas.build(), seed), len(train))
    return rows.rows


def run_evaluate(cfg: ExperimentConfig, seed: int, out: Path) -> list[dict]:
    p: EvaluatePipeline = cfg.pipeline
    ref, cand = load_dataset(p.reference), load_dataset(p.candidate)
    rows = Rows(cfg, seed)
    for metric in p.metrics:
        if metric == "frechet":
            fd = frechet_distance(MomentSummary.from_samples(cand.x), MomentSummary.from_samples(ref.x))
            rows.add("evaluate/frechet", fd, len(cand))
        elif metric == "cas":
            if cand.labels is None or ref.labels is None:
                raise ValueError("CAS needs labelled candidate and reference datasets")
            rows.add("evaluate/cas", cas(cand.labelled(), ref.labelled(), p.num_classes, p.cas.build(), seed),
                     len(cand))
        else:
            if cand.masks is None or ref.masks is None:
                raise ValueError("mIoU needs masks in both datasets")
            C = p.num_classes or int(max(cand.masks.max(), ref.masks.max())) + 1
            rows.add("evaluate/miou", miou(cand.masks, ref.masks, C), len(cand))
    return rows.rows


PIPELINES = {"train": run_train, "finetune": run_finetune, "guide": run_guide, "reject": run_reject,
             "augment": run_augment, "sweep": run_sweep, "evaluate": run_evaluate}


# ---------------------------------------------------------------------------
# driver


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_metrics(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "value": repr(r["value"])})


def run_experiment(cfg: ExperimentConfig, output_dir=None) -> list[dict]:
    """Run the configured pipeline for every seed; returns the metric rows."""
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    for seed in cfg.seeds:
        sd = out / f"seed{seed}"
        sd.mkdir(exist_ok=True)
        rows += PIPELINES[cfg.pipeline.name](cfg, seed, sd)
    write_metrics(out / "metrics.csv", rows)
    (out / "config.json").write_text(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    artifacts = {str(p.relative_to(out)): _sha256(p) for p in sorted(out.rglob("*"))
                 if p.is_file() and p.name != "manifest.json"}
    manifest = {"config_hash": cfg.config_hash(), "code_version": __version__, "pipeline": cfg.pipeline.name,
                "seeds": list(cfg.seeds), "artifacts": artifacts,
                "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return rows
