"""Synthetic 2-D data, CSV ingestion and jitter augmentation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    """Samples in ID order. ``labels`` is for evaluation only; training never reads it."""

    ids: np.ndarray
    x: np.ndarray
    labels: list[str | None] = field(default_factory=list)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        if not self.labels:
            self.labels = [None] * len(self.ids)
        if self.x.ndim != 2 or self.x.shape[0] != self.ids.size or len(self.labels) != self.ids.size:
            raise ValueError("ids, features and labels disagree in length")

    def __len__(self) -> int:
        return int(self.ids.size)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def has_labels(self) -> bool:
        return all(lab is not None for lab in self.labels)


@dataclass
class SpiralShape:
    inner_radius: float = 0.1
    radial_span: float = 0.85
    # total angle swept by each arm, in units of pi
    sweep: float = 0.8


def arm_sizes(n: int, arms: int) -> list[int]:
    base, extra = divmod(n, arms)
    return [base + (1 if a < extra else 0) for a in range(arms)]


def spiral_curve(arm: int, arms: int, t, shape: SpiralShape = SpiralShape()) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    rho = shape.inner_radius + shape.radial_span * t
    phi = 2.0 * np.pi * arm / arms + shape.sweep * np.pi * t
    return np.stack([rho * np.cos(phi), rho * np.sin(phi)], axis=-1)


def gen_spiral(n: int = 1000, arms: int = 3, seed: int = 0, jitter: float = 0.01,
               shape: SpiralShape = SpiralShape()) -> Dataset:
    """Points along ``arms`` interleaved spiral arms, labelled by arm index.

    When ``n`` is not a multiple of ``arms`` the first ``n % arms`` arms get
    one extra point.
    """
    if n < arms or arms < 1:
        raise ValueError(f"need at least one point per arm (n={n}, arms={arms})")
    rng = np.random.default_rng(seed)
    pts, labels = [], []
    for a, size in enumerate(arm_sizes(n, arms)):
        t = np.arange(size) / size
        pts.append(spiral_curve(a, arms, t, shape))
        labels += [str(a)] * size
    x = np.vstack(pts)
    if jitter > 0:
        x = x + rng.normal(0.0, jitter, size=x.shape)
    np.clip(x, -1.0, 1.0, out=x)
    return Dataset(np.arange(1, n + 1), x, labels)


def gen_uniform(n: int = 10000, seed: int = 0) -> Dataset:
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    return Dataset(np.arange(1, n + 1), rng.uniform(-1.0, 1.0, size=(n, 2)))


class CSVFormatError(ValueError):
    pass


def _num(v: float) -> str:
    return format(float(v), ".17g")


def write_csv(dataset: Dataset, path, value_prefix: str = "x") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label"] + [f"{value_prefix}{j + 1}" for j in range(dataset.dim)])
        for i, lab, row in zip(dataset.ids, dataset.labels, dataset.x):
            w.writerow([int(i), "" if lab is None else lab] + [_num(v) for v in row])


def load_csv(path) -> Dataset:
    """Read ``id,label,<features...>``; an empty label means unlabelled."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVFormatError(f"{path}: empty file") from None
        if len(header) < 3 or [h.strip() for h in header[:2]] != ["id", "label"]:
            raise CSVFormatError(f"{path}:1: header must start with id,label and name at least one feature")
        width = len(header) - 2
        ids, labels, rows, seen = [], [], [], {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != width + 2:
                raise CSVFormatError(f"{path}:{lineno}: expected {width + 2} fields, found {len(rec)}")
            try:
                sid = int(rec[0])
                vals = [float(v) for v in rec[2:]]
            except ValueError as exc:
                raise CSVFormatError(f"{path}:{lineno}: {exc}") from None
            if sid in seen:
                raise CSVFormatError(f"{path}:{lineno}: duplicate id {sid} (first seen on line {seen[sid]})")
            if not all(np.isfinite(vals)):
                raise CSVFormatError(f"{path}:{lineno}: non-finite feature value")
            seen[sid] = lineno
            ids.append(sid)
            labels.append(rec[1] if rec[1] != "" else None)
            rows.append(vals)
    x = np.array(rows, dtype=np.float64).reshape(len(rows), width)
    return Dataset(np.array(ids, dtype=np.int64), x, labels)


@dataclass
class AugmentConfig:
    jitter_std: float = 0.01
    prob: float = 0.8
    enabled: bool = True


def augment(x, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Add isotropic Gaussian jitter to each row independently with probability ``prob``."""
    x = np.asarray(x, dtype=np.float64)
    if not config.enabled or config.prob <= 0 or config.jitter_std <= 0:
        return x.copy()
    rows = x.reshape(-1, x.shape[-1])
    hit = rng.random(rows.shape[0]) < config.prob
    noise = rng.normal(0.0, config.jitter_std, size=rows.shape)
    return (rows + noise * hit[:, None]).reshape(x.shape)
