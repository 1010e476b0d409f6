"""Procedural datasets with exact ground truth, splits, and the on-disk container.

Container layout (a directory)::

    data.dtns    stacked samples, shape (n, *sample_shape)
    masks.dtns   optional per-cell class grids, shape (n, H, W)
    meta.jsonl   one object per record: index, class_label, attributes
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dtns
from .denoiser import GmmSpec


class DatasetError(ValueError):
    pass


@dataclass(eq=False)
class Dataset:
    x: np.ndarray
    labels: np.ndarray | None = None  # -1 marks an unlabelled record
    attributes: np.ndarray | None = None
    masks: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        n = len(self.x)
        for name in ("labels", "attributes", "masks"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v, dtype=np.uint8 if name == "attributes" else np.int64)
            if len(v) != n:
                raise DatasetError(f"{name} has {len(v)} entries for {n} records")
            setattr(self, name, v)
        if self.masks is not None and self.masks.shape[1:] != self.x.shape[1:]:
            raise DatasetError(f"mask shape {self.masks.shape[1:]} does not match grid {self.x.shape[1:]}")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.x.shape[1:]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        pick = lambda v: None if v is None else v[idx]  # noqa: E731
        return Dataset(self.x[idx], pick(self.labels), pick(self.attributes), pick(self.masks))

    def labelled(self) -> "Dataset":
        if self.labels is None:
            return self.subset([])
        return self.subset(np.flatnonzero(self.labels >= 0))

    def equals(self, other: "Dataset") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.dtype == b.dtype and np.array_equal(a, b)

        return all(same(getattr(self, k), getattr(other, k)) for k in ("x", "labels", "attributes", "masks"))

    @staticmethod
    def concat(parts: list["Dataset"]) -> "Dataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise DatasetError("nothing to concatenate")

        def cat(name):
            vals = [getattr(p, name) for p in parts]
            return None if any(v is None for v in vals) else np.concatenate(vals)

        return Dataset(cat("x"), cat("labels"), cat("attributes"), cat("masks"))


# ---------------------------------------------------------------------------
# generators


def gen_gmm_dataset(gmm: GmmSpec, n: int, seed: int) -> Dataset:
    """I.i.d. mixture draws; label = component, attribute bits = signs of the component mean."""
    if n < 1:
        raise DatasetError("n must be >= 1")
    x, k = gmm.sample(n, np.random.default_rng(seed))
    return Dataset(x, k, (gmm.means[k] > 0).astype(np.uint8))


@dataclass(frozen=True)
class GridMaskSpec:
    size: int = 8
    background: tuple[float, float] = (0.0, 0.08)
    bands: tuple[tuple[float, float], ...] = ((0.33, 0.41), (0.64, 0.72), (0.92, 1.0))
    min_side: int = 2
    max_side: int = 5
    noise_level: float = 0.03

    def __post_init__(self):
        if not 1 <= self.min_side <= self.max_side <= self.size:
            raise DatasetError("rectangle sides must satisfy 1 <= min_side <= max_side <= size")
        for lo, hi in (self.background, *self.bands):
            if not 0.0 <= lo <= hi <= 1.0:
                raise DatasetError(f"intensity band ({lo}, {hi}) outside [0, 1]")
        if self.noise_level < 0:
            raise DatasetError("noise level must be non-negative")

    @property
    def num_classes(self) -> int:
        """Foreground classes; mask ids run 0 (background) .. num_classes."""
        return len(self.bands)

    def expected_area_fraction(self) -> float:
        mean_side = (self.min_side + self.max_side) / 2.0
        return mean_side**2 / self.size**2

    def to_config(self) -> dict:
        return {"size": self.size, "background": list(self.background), "bands": [list(b) for b in self.bands],
                "min_side": self.min_side, "max_side": self.max_side, "noise_level": self.noise_level}


def gen_gridmask_dataset(spec: GridMaskSpec, n: int, seed: int) -> Dataset:
    """One axis-aligned rectangle per grid; its class sets both intensity band and mask id."""
    if n < 1:
        raise DatasetError("n must be >= 1")
    rng = np.random.default_rng(seed)
    S = spec.size
    bg = rng.uniform(*spec.background, size=n)
    cls = rng.integers(1, spec.num_classes + 1, size=n)
    h = rng.integers(spec.min_side, spec.max_side + 1, size=n)
    w = rng.integers(spec.min_side, spec.max_side + 1, size=n)
    r0 = (rng.random(n) * (S - h + 1)).astype(np.int64)
    c0 = (rng.random(n) * (S - w + 1)).astype(np.int64)
    bands = np.asarray(spec.bands)
    val = rng.uniform(bands[cls - 1, 0], bands[cls - 1, 1])
    rows = np.arange(S)[None, :, None]
    cols = np.arange(S)[None, None, :]
    inside = ((rows >= r0[:, None, None]) & (rows < (r0 + h)[:, None, None])
              & (cols >= c0[:, None, None]) & (cols < (c0 + w)[:, None, None]))
    img = np.where(inside, val[:, None, None], bg[:, None, None])
    img = np.clip(img + spec.noise_level * rng.standard_normal(img.shape), 0.0, 1.0)
    masks = np.where(inside, cls[:, None, None], 0)
    return Dataset(img, cls - 1, None, masks)


def oracle_segment(x, spec: GridMaskSpec) -> np.ndarray:
    """Per-cell class by nearest intensity band (background band is class 0)."""
    x = np.asarray(x, dtype=np.float64)
    bands = np.asarray([spec.background, *spec.bands])
    dist = np.maximum(bands[:, 0] - x[..., None], 0) + np.maximum(x[..., None] - bands[:, 1], 0)
    return dist.argmin(axis=-1)


# ---------------------------------------------------------------------------
# splits and persistence


def _largest_remainder(n: int, fractions) -> list[int]:
    raw = np.asarray(fractions, dtype=np.float64) * n
    sizes = np.floor(raw).astype(int)
    order = np.argsort(-(raw - sizes), kind="stable")
    for i in order[: n - sizes.sum()]:
        sizes[i] += 1
    return sizes.tolist()


def split(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, ...]:
    fr = np.asarray(fractions, dtype=np.float64)
    if np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9 or not np.any(fr > 0):
        raise DatasetError(f"degenerate split fractions {fractions}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    cuts = np.cumsum(_largest_remainder(len(ds), fr))[:-1]
    return tuple(ds.subset(idx) for idx in np.split(perm, cuts))


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    dtns.save(path / "data.dtns", ds.x)
    if ds.masks is not None:
        dtns.save(path / "masks.dtns", ds.masks.astype(np.float32))
    elif (path / "masks.dtns").exists():
        (path / "masks.dtns").unlink()
    with open(path / "meta.jsonl", "w") as f:
        for i in range(len(ds)):
            lab = None if ds.labels is None or ds.labels[i] < 0 else int(ds.labels[i])
            attrs = None if ds.attributes is None else ds.attributes[i].tolist()
            f.write(json.dumps({"index": i, "class_label": lab, "attributes": attrs}) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    meta_path = path / "meta.jsonl"
    if not meta_path.exists():
        raise DatasetError(f"{meta_path}: missing record metadata")
    try:
        x = dtns.load(path / "data.dtns")
    except FileNotFoundError:
        raise DatasetError(f"{path / 'data.dtns'}: missing sample tensor") from None
    except dtns.DTNSError as exc:
        raise DatasetError(str(exc)) from None
    masks = None
    if (path / "masks.dtns").exists():
        try:
            masks = dtns.load(path / "masks.dtns").astype(np.int64)
        except dtns.DTNSError as exc:
            raise DatasetError(str(exc)) from None
    with open(meta_path) as f:
        try:
            meta = [json.loads(line) for line in f if line.strip()]
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{meta_path}: malformed line ({exc})") from None
    if len(meta) != len(x):
        raise DatasetError(f"{meta_path}: {len(meta)} records but data.dtns holds {len(x)}")
    if [r.get("index") for r in meta] != list(range(len(x))):
        raise DatasetError(f"{meta_path}: record indices are not 0..n-1 in order")
    labels = None
    if any(r["class_label"] is not None for r in meta):
        labels = np.array([-1 if r["class_label"] is None else r["class_label"] for r in meta])
    attributes = None
    if any(r["attributes"] is not None for r in meta):
        if any(r["attributes"] is None for r in meta):
            raise DatasetError(f"{meta_path}: attributes present on some records only")
        attributes = np.array([r["attributes"] for r in meta], dtype=np.uint8)
    return Dataset(x, labels, attributes, masks)
