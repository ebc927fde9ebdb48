"""Characteristic reconstruction and pooled embeddings from multi-window driver/response data.

Nothing here reads an entity's stored characteristics: windows are cut from
drivers and response only, so corrupted or missing attributes cannot leak
into the estimates.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import neuralcore as nc
from .datahub import Dataset, EntityRecord, make_windows
from .errors import ConfigError, DataError
from .trainer import Checkpoint

_CHUNK = 512


@dataclass(frozen=True)
class CharacteristicEstimate:
    entity_id: str
    estimate: np.ndarray  # standardized space
    estimate_physical: np.ndarray
    uncertainty: np.ndarray  # population std of the pooled window predictions
    embedding: np.ndarray
    window_count: int
    window_predictions: np.ndarray  # (checkpoints * windows, D_z)
    char_names: tuple[str, ...] = ()


def _windows(record: EntityRecord, period, window: int, stride: int) -> np.ndarray:
    if period is not None and period[1] - period[0] < window:
        raise DataError(f"{record.id}: period of {period[1] - period[0]} steps is shorter than window {window}")
    return make_windows(record, window, stride, period)


@torch.no_grad()
def predict_windows(checkpoint: Checkpoint, windows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Embeddings ``(K, H)`` and characteristic predictions ``(K, D_z)`` for a stack of windows."""
    params = checkpoint.params
    dtype = checkpoint.config.torch_dtype
    cand = checkpoint.config.candidate_activation
    hs, zs = [], []
    for lo in range(0, len(windows), _CHUNK):
        x = torch.as_tensor(windows[lo : lo + _CHUNK], dtype=dtype)
        h = nc.encode(params.encoder, x, candidate=cand)
        hs.append(h.double().numpy())
        zs.append(nc.inverse_head(params.inverse_head, h).double().numpy())
    return np.concatenate(hs), np.concatenate(zs)


def embed_entity(
    checkpoint: Checkpoint,
    record: EntityRecord,
    period: tuple[int, int] | None = None,
    window: int | None = None,
    stride: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Pooled embedding (elementwise mean over windows) and the per-window embeddings.

    Windows default to non-overlapping segments (stride = window).
    """
    window = window or checkpoint.config.window
    windows = _windows(record, period, window, stride or window)
    h, _ = predict_windows(checkpoint, windows)
    return h.mean(axis=0), h


def _pool(entity_id, preds: np.ndarray, embeds: np.ndarray, n_windows: int, checkpoint: Checkpoint):
    mean = preds.mean(axis=0)
    unc = np.sqrt(((preds - mean) ** 2).mean(axis=0))
    return CharacteristicEstimate(
        entity_id=entity_id,
        estimate=mean,
        estimate_physical=checkpoint.stats.characteristics_to_physical(mean),
        uncertainty=unc,
        embedding=embeds,
        window_count=n_windows,
        window_predictions=preds,
        char_names=tuple(checkpoint.char_names),
    )


def _check_checkpoints(checkpoints: Sequence[Checkpoint]) -> None:
    if not checkpoints:
        raise ConfigError("at least one checkpoint is required")
    names = {tuple(c.char_names) for c in checkpoints}
    if len(names) != 1:
        raise ConfigError("checkpoints disagree on the characteristic schema")


def estimate_characteristics(
    checkpoints: Sequence[Checkpoint],
    record: EntityRecord,
    period: tuple[int, int] | None = None,
    stride: int | None = None,
) -> CharacteristicEstimate:
    """Mean and population std over every (checkpoint, window) prediction; embedding averaged per checkpoint."""
    _check_checkpoints(checkpoints)
    preds, embeds, n_windows = [], [], 0
    for ckpt in checkpoints:
        window = ckpt.config.window
        windows = _windows(record, period, window, stride or window)
        h, z = predict_windows(ckpt, windows)
        preds.append(z)
        embeds.append(h.mean(axis=0))
        n_windows = len(windows)
    return _pool(record.id, np.concatenate(preds), np.mean(embeds, axis=0), n_windows, checkpoints[0])


def denoise_or_impute(
    checkpoints: Sequence[Checkpoint],
    dataset: Dataset,
    target_entities: Sequence[str] | None = None,
    period=None,
    stride: int | None = None,
) -> list[CharacteristicEstimate]:
    """Estimates for every target entity, batched across entities per checkpoint."""
    _check_checkpoints(checkpoints)
    targets = dataset.ids if target_entities is None else list(target_entities)
    bounds = dataset.resolve_period(period)
    per_entity_preds = {eid: [] for eid in targets}
    per_entity_embeds = {eid: [] for eid in targets}
    counts = {}
    for ckpt in checkpoints:
        window = ckpt.config.window
        stacks = [_windows(dataset[eid], bounds, window, stride or window) for eid in targets]
        h, z = predict_windows(ckpt, np.concatenate(stacks))
        offset = 0
        for eid, w in zip(targets, stacks):
            k = len(w)
            per_entity_preds[eid].append(z[offset : offset + k])
            per_entity_embeds[eid].append(h[offset : offset + k].mean(axis=0))
            counts[eid] = k
            offset += k
    return [
        _pool(eid, np.concatenate(per_entity_preds[eid]), np.mean(per_entity_embeds[eid], axis=0), counts[eid], checkpoints[0])
        for eid in targets
    ]


ESTIMATE_COLUMNS = ["entity_id", "characteristic", "estimate_std_space", "estimate_physical", "uncertainty", "window_count"]


def write_estimates_csv(path: str | Path, estimates: Sequence[CharacteristicEstimate]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ESTIMATE_COLUMNS)
        for est in estimates:
            for j, name in enumerate(est.char_names):
                w.writerow(
                    [
                        est.entity_id,
                        name,
                        repr(float(est.estimate[j])),
                        repr(float(est.estimate_physical[j])),
                        repr(float(est.uncertainty[j])),
                        est.window_count,
                    ]
                )


def write_embeddings_csv(path: str | Path, estimates: Sequence[CharacteristicEstimate]) -> None:
    if not estimates:
        raise DataError("no estimates to write")
    dim = len(estimates[0].embedding)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity_id", *(f"dim_{k}" for k in range(dim))])
        for est in estimates:
            w.writerow([est.entity_id, *(repr(float(v)) for v in est.embedding)])


def read_estimates_csv(path: str | Path, column: str = "estimate_std_space") -> tuple[list[str], list[str], np.ndarray]:
    """Return ``(entity_ids, characteristic_names, matrix)`` from an estimates CSV."""
    rows: dict[str, dict[str, float]] = {}
    names: list[str] = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(row["entity_id"], {})[row["characteristic"]] = float(row[column])
            if row["characteristic"] not in names:
                names.append(row["characteristic"])
    ids = list(rows)
    return ids, names, np.array([[rows[i][n] for n in names] for i in ids])


def read_embeddings_csv(path: str | Path) -> dict[str, np.ndarray]:
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            out[row[0]] = np.array([float(v) for v in row[1:]])
    return out
