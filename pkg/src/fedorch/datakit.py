"""Datasets: deterministic splitting, CSV ingestion, and synthetic site generation.

Synthetic sites are class-conditional Gaussians along a fixed unit direction:
negatives centered at (-1 + mean_shift)*u, positives at (+1 + mean_shift)*u,
with isotropic coordinate noise. Per-site positive fractions, mean shifts, and
noise scales reproduce the cross-site heterogeneity the federation has to
cope with: label skew, regional domain shift, and one low-quality (noisy)
site. Scenario presets live in presets.yaml next to this module.

CSV schema: header ``f0,...,f{D-1},label``, one sample per row, decimal
floats, label 0/1. An optional leading comment ``# split_seed=<int>`` pins the
split permutation for files that travel between machines.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import yaml

from .errors import DatasetParseError, InvalidProfile, TooFewSamples, UnknownPreset

SeedLike = Union[int, Sequence[int]]

DEFAULT_SPLIT = (0.7, 0.2)


def _rng(seed: SeedLike, *stream: int) -> np.random.Generator:
    parts = (seed,) if isinstance(seed, (int, np.integer)) else tuple(seed)
    return np.random.default_rng(tuple(int(p) for p in parts) + stream)


@dataclass(frozen=True)
class SiteProfile:
    """Recipe for one synthetic site."""

    site_id: str
    n_samples: int
    positive_fraction: float
    mean_shift: float
    noise_scale: float
    seed: int

    def __post_init__(self):
        if self.n_samples < 10:
            raise InvalidProfile(f"{self.site_id!r}: n_samples must be >= 10")
        if not 0.0 < self.positive_fraction < 1.0:
            raise InvalidProfile(f"{self.site_id!r}: positive_fraction must be in (0,1)")
        if self.noise_scale < 0.0:
            raise InvalidProfile(f"{self.site_id!r}: noise_scale must be >= 0")


@dataclass(frozen=True)
class SiteDataset:
    """Labeled feature matrix with its train/val/test split indices."""

    site_id: str
    features: np.ndarray  # N x D float32, read-only
    labels: np.ndarray  # N ints in {0,1}
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.ndim != 2:
            raise ValueError("features must be an N x D matrix")
        if not np.isfinite(feats).all():
            raise ValueError("features must be finite")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (feats.shape[0],) or not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be one 0/1 value per row")
        splits = [np.asarray(s, dtype=np.int64) for s in (self.train_idx, self.val_idx, self.test_idx)]
        merged = np.concatenate(splits) if splits else np.array([], dtype=np.int64)
        if len(np.unique(merged)) != merged.size or sorted(merged.tolist()) != list(range(feats.shape[0])):
            raise ValueError("splits must be disjoint and cover every row exactly once")
        feats = feats.copy()
        feats.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "train_idx", splits[0])
        object.__setattr__(self, "val_idx", splits[1])
        object.__setattr__(self, "test_idx", splits[2])

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]


def split_dataset(
    n: int, seed: SeedLike, fractions: tuple[float, float] = DEFAULT_SPLIT
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded permutation split: floor(f0*n) train, floor(f1*n) val, rest test."""
    if n < 10:
        raise TooFewSamples(f"need at least 10 samples to split, got {n}")
    f_train, f_val = fractions
    if f_train <= 0 or f_val <= 0 or f_train + f_val >= 1:
        raise ValueError(f"split fractions must be positive and sum below 1, got {fractions}")
    perm = _rng(seed).permutation(n)
    n_train = math.floor(f_train * n)
    n_val = math.floor(f_val * n)
    return (
        perm[:n_train],
        perm[n_train:n_train + n_val],
        perm[n_train + n_val:],
    )


def generate_site(
    profile: SiteProfile,
    input_dim: int,
    split_fractions: tuple[float, float] = DEFAULT_SPLIT,
) -> SiteDataset:
    """Deterministic synthetic site matching the profile's skew, shift, and noise."""
    if input_dim < 1:
        raise InvalidProfile(f"input_dim must be >= 1, got {input_dim}")
    n = profile.n_samples
    n_pos = int(round(profile.positive_fraction * n))
    direction = np.full(input_dim, 1.0 / math.sqrt(input_dim))

    rng = _rng(profile.seed, 0)
    labels = np.concatenate([np.ones(n_pos, dtype=np.int64), np.zeros(n - n_pos, dtype=np.int64)])
    labels = labels[rng.permutation(n)]
    polarity = np.where(labels == 1, 1.0, -1.0)
    centers = (polarity + profile.mean_shift)[:, None] * direction[None, :]
    noise = rng.standard_normal((n, input_dim)) * profile.noise_scale
    features = (centers + noise).astype(np.float32)

    train_idx, val_idx, test_idx = split_dataset(n, (profile.seed, 1), split_fractions)
    return SiteDataset(
        site_id=profile.site_id,
        features=features,
        labels=labels,
        train_idx=train_idx,
        val_idx=val_idx,
        test_idx=test_idx,
    )


def write_csv(dataset: SiteDataset, path, split_seed: int | None = None) -> None:
    """Write the documented CSV layout, optionally pinning the split seed."""
    path = Path(path)
    d = dataset.input_dim
    with path.open("w", newline="") as fh:
        if split_seed is not None:
            fh.write(f"# split_seed={int(split_seed)}\n")
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(d)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([format(float(v), ".9g") for v in row] + [int(label)])


def load_csv(path, seed: SeedLike = 0, split_fractions: tuple[float, float] = DEFAULT_SPLIT) -> SiteDataset:
    """Parse a dataset CSV; the split comes from the file's seed line or `seed`."""
    path = Path(path)
    split_seed: SeedLike = seed
    with path.open("r", newline="") as fh:
        lines = fh.read().splitlines()
    pos = 0
    if lines and lines[0].startswith("#"):
        body = lines[0].lstrip("#").strip()
        if not body.startswith("split_seed="):
            raise DatasetParseError(f"{path.name}: unrecognized header comment {lines[0]!r}")
        try:
            split_seed = int(body.split("=", 1)[1])
        except ValueError as exc:
            raise DatasetParseError(f"{path.name}: bad split_seed value") from exc
        pos = 1
    if pos >= len(lines):
        raise DatasetParseError(f"{path.name}: missing header row")
    header = next(csv.reader([lines[pos]]))
    if len(header) < 2 or header[-1] != "label":
        raise DatasetParseError(f"{path.name}: header must be f0,...,label")
    d = len(header) - 1
    if header[:-1] != [f"f{i}" for i in range(d)]:
        raise DatasetParseError(f"{path.name}: feature columns must be f0..f{d - 1}")
    rows: list[list[float]] = []
    labels: list[int] = []
    for offset, cells in enumerate(csv.reader(lines[pos + 1:])):
        row_no = pos + 2 + offset  # 1-based physical line number
        if not cells:
            continue
        if len(cells) != d + 1:
            raise DatasetParseError(f"{path.name} row {row_no}: expected {d + 1} cells, got {len(cells)}")
        try:
            values = [float(c) for c in cells[:-1]]
        except ValueError as exc:
            raise DatasetParseError(f"{path.name} row {row_no}: non-numeric feature cell") from exc
        if not all(math.isfinite(v) for v in values):
            raise DatasetParseError(f"{path.name} row {row_no}: non-finite feature cell")
        rows.append(values)
        if cells[-1] not in ("0", "1"):
            raise DatasetParseError(f"{path.name} row {row_no}: label must be 0 or 1, got {cells[-1]!r}")
        labels.append(int(cells[-1]))
    features = np.asarray(rows, dtype=np.float32)
    train_idx, val_idx, test_idx = split_dataset(len(rows), split_seed, split_fractions)
    return SiteDataset(
        site_id=path.stem,
        features=features,
        labels=np.asarray(labels, dtype=np.int64),
        train_idx=train_idx,
        val_idx=val_idx,
        test_idx=test_idx,
    )


def _load_preset_file() -> dict:
    text = resources.files("fedorch").joinpath("presets.yaml").read_text()
    return yaml.safe_load(text)


def preset_config(name: str) -> dict:
    """Raw preset block: input_dim, split fractions, site list."""
    presets = _load_preset_file()
    if name not in presets:
        raise UnknownPreset(f"unknown preset {name!r}; have {sorted(presets)}")
    return presets[name]


def scenario_preset(name: str) -> list[SiteProfile]:
    """Site profiles for a named scenario preset."""
    block = preset_config(name)
    return [SiteProfile(**site) for site in block["sites"]]


def preset_sites(name: str, run_seed: int | None = None) -> tuple[list[SiteDataset], int]:
    """Materialize a preset's sites; run_seed redraws every site for that run."""
    block = preset_config(name)
    input_dim = int(block["input_dim"])
    fractions = tuple(block.get("split", DEFAULT_SPLIT))
    datasets = []
    for i, site in enumerate(block["sites"]):
        profile = SiteProfile(**site)
        if run_seed is not None:
            profile = replace(profile, seed=int(np.random.default_rng((run_seed, i)).integers(2**31)))
        datasets.append(generate_site(profile, input_dim, fractions))
    return datasets, input_dim
