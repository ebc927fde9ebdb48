"""Normalization, windowing, pair sampling and the corruption / missing-value injectors."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .records import DataError, Dataset, EntityRecord, NormalizationStats, WindowPair


def _column_stats(values: np.ndarray, what: str, allow_empty: bool = False) -> tuple[np.ndarray, np.ndarray]:
    mean = np.zeros(values.shape[1])
    std = np.ones(values.shape[1])
    for j in range(values.shape[1]):
        col = values[:, j]
        col = col[np.isfinite(col)]
        if col.size == 0:
            if allow_empty:
                continue
            raise DataError(f"{what} column {j} has no values in the fit set")
        mean[j] = col.mean()
        std[j] = col.std()
        if not std[j] > 0:
            raise DataError(f"{what} column {j} has zero variance in the fit set")
    return mean, std


def fit_normalize(
    dataset: Dataset, fit_entity_ids: Sequence[str] | None = None, fit_period=None
) -> tuple[Dataset, NormalizationStats]:
    """Z-score drivers, response and characteristics with statistics from the fit subset only.

    Drivers and the response use one global mean/std per column (not per
    entity) so that between-entity differences survive standardization.
    """
    if dataset.standardized:
        raise DataError("dataset is already standardized")
    ids = dataset.ids if fit_entity_ids is None else list(fit_entity_ids)
    if not ids:
        raise DataError("fit set is empty")
    lo, hi = dataset.resolve_period(fit_period)
    recs = [dataset[i] for i in ids]
    drivers = np.concatenate([r.drivers[lo:hi] for r in recs])
    response = np.concatenate([r.response[lo:hi] for r in recs])
    d_mean, d_std = _column_stats(drivers, "driver")
    r_mean, r_std = _column_stats(response[:, None], "response")
    chars = np.stack([np.where(r.mask, r.characteristics, np.nan) for r in recs])
    c_mean, c_std = _column_stats(chars, "characteristic", allow_empty=True)
    stats = NormalizationStats(d_mean, d_std, float(r_mean[0]), float(r_std[0]), c_mean, c_std)
    return apply_normalization(dataset, stats), stats


def apply_normalization(dataset: Dataset, stats: NormalizationStats) -> Dataset:
    if dataset.standardized:
        raise DataError("dataset is already standardized")
    out = []
    for r in dataset:
        out.append(
            replace(
                r,
                drivers=(r.drivers - stats.driver_mean) / stats.driver_std,
                response=(r.response - stats.response_mean) / stats.response_std,
                characteristics=(r.characteristics - stats.char_mean) / stats.char_std,
                characteristics_true=None
                if r.characteristics_true is None
                else (r.characteristics_true - stats.char_mean) / stats.char_std,
            )
        )
    return replace(dataset, records=tuple(out), stats=stats)


def invert_normalization(dataset: Dataset) -> Dataset:
    stats = dataset.stats
    if stats is None:
        raise DataError("dataset is not standardized")
    out = []
    for r in dataset:
        out.append(
            replace(
                r,
                drivers=r.drivers * stats.driver_std + stats.driver_mean,
                response=r.response * stats.response_std + stats.response_mean,
                characteristics=stats.characteristics_to_physical(r.characteristics),
                characteristics_true=None
                if r.characteristics_true is None
                else stats.characteristics_to_physical(r.characteristics_true),
            )
        )
    return replace(dataset, records=tuple(out), stats=None)


def window_count(length: int, window: int, stride: int) -> int:
    return (length - window) // stride + 1


def make_windows(record: EntityRecord, window: int, stride: int, period: tuple[int, int] | None = None) -> np.ndarray:
    """Cut ``[x_t; y_t]`` rows into windows starting at 0, stride, 2*stride, ... -> ``(K, W, D_x + 1)``."""
    if window < 1 or stride < 1:
        raise DataError("window and stride must be >= 1")
    seq = record.sequence(period)
    if seq.shape[0] < window:
        raise DataError(f"{record.id}: series length {seq.shape[0]} shorter than window {window}")
    starts = range(0, seq.shape[0] - window + 1, stride)
    return np.stack([seq[s : s + window] for s in starts])


def sample_pairs(
    dataset: Dataset,
    entity_ids: Sequence[str],
    n: int,
    window: int,
    rng,
    period: tuple[int, int] | None = None,
) -> list[WindowPair]:
    """Pick ``n`` distinct entities and two uniform window starts for each."""
    rng = np.random.default_rng(rng)
    if n > len(entity_ids):
        raise DataError(f"batch of {n} entities requested but only {len(entity_ids)} available")
    lo, hi = dataset.resolve_period(period)
    if hi - lo < window:
        raise DataError(f"period of {hi - lo} steps is shorter than window {window}")
    chosen = rng.choice(len(entity_ids), size=n, replace=False)
    pairs = []
    for k in chosen:
        rec = dataset[entity_ids[k]]
        seq = rec.sequence((lo, hi))
        ta, tp = rng.integers(0, hi - lo - window + 1, size=2)
        pairs.append(WindowPair(rec.id, seq[ta : ta + window], seq[tp : tp + window], int(lo + ta), int(lo + tp)))
    return pairs


@dataclass(frozen=True)
class CorruptionSpec:
    mode: str = "noise"  # "noise" | "missing"
    entity_fraction: float = 0.5
    noise_multiple: float = 2.0
    seed: int = 0
    granularity: str = "entity"  # "entity" | "entry"

    def __post_init__(self):
        if self.mode not in ("noise", "missing"):
            raise ValueError(f"unknown corruption mode {self.mode!r}")
        if not 0.0 <= self.entity_fraction <= 1.0:
            raise ValueError("entity_fraction must lie in [0, 1]")
        if self.mode == "noise" and not self.noise_multiple > 0:
            raise ValueError("noise_multiple must be > 0")
        if self.granularity not in ("entity", "entry"):
            raise ValueError(f"unknown granularity {self.granularity!r}")


def _targets(dataset: Dataset, entity_ids) -> list[str]:
    return dataset.ids if entity_ids is None else sorted(entity_ids)


def corrupt(dataset: Dataset, spec: CorruptionSpec, entity_ids: Sequence[str] | None = None) -> Dataset:
    """Add N(0, (m * sigma_i)^2) noise to the characteristics of a random subset of entities.

    Works in standardized space, where sigma_i = 1 for every column. Only
    ``entity_ids`` (default: all) are eligible. Original values are kept in
    ``characteristics_true``.
    """
    if spec.mode == "missing":
        return mask_missing(dataset, spec.entity_fraction, spec.seed, entity_ids)
    if not dataset.standardized:
        raise DataError("corrupt() expects standardized characteristics")
    rng = np.random.default_rng(spec.seed)
    ids = _targets(dataset, entity_ids)
    d_z = len(dataset.char_names)
    if spec.granularity == "entity":
        chosen = rng.permutation(len(ids))[: math.floor(spec.entity_fraction * len(ids))]
        selected = np.zeros((len(ids), d_z), dtype=bool)
        selected[chosen] = True
    else:
        flat = rng.permutation(len(ids) * d_z)[: math.floor(spec.entity_fraction * len(ids) * d_z)]
        selected = np.zeros(len(ids) * d_z, dtype=bool)
        selected[flat] = True
        selected = selected.reshape(len(ids), d_z)
    noise = rng.normal(0.0, spec.noise_multiple, size=(len(ids), d_z))
    changed = {}
    for row, eid in enumerate(ids):
        if not selected[row].any():
            continue
        rec = dataset[eid]
        z = np.where(selected[row] & rec.mask, rec.characteristics + noise[row], rec.characteristics)
        changed[eid] = replace(rec, characteristics=z, characteristics_true=rec.truth)
    return dataset.with_records([changed.get(r.id, r) for r in dataset])


def mask_missing(dataset: Dataset, fraction: float, rng, entity_ids: Sequence[str] | None = None) -> Dataset:
    """Mark all characteristics of ``floor(fraction * n)`` random entities as unavailable."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    rng = np.random.default_rng(rng)
    ids = _targets(dataset, entity_ids)
    chosen = {ids[k] for k in rng.permutation(len(ids))[: math.floor(fraction * len(ids))]}
    out = []
    for rec in dataset:
        if rec.id in chosen:
            rec = replace(
                rec,
                characteristics=np.full_like(rec.characteristics, np.nan),
                mask=np.zeros_like(rec.mask),
                characteristics_true=rec.truth,
            )
        out.append(rec)
    return dataset.with_records(out)
