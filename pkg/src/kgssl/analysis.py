"""Metrics and analysis artifacts: RMSE/CORR tables, group summaries, seriated
distance matrices and embedding-characteristic correlations."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

UNDEFINED = float("nan")  # marker for correlations with a constant column


def _pair(pred, truth, min_len: int):
    p = np.asarray(pred, dtype=float).ravel()
    t = np.asarray(truth, dtype=float).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} vs {t.size}")
    if p.size < min_len:
        raise ValueError(f"need at least {min_len} values, got {p.size}")
    return p, t


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth, 1)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def corr(pred, truth) -> float:
    """Pearson correlation; raises on a constant input."""
    p, t = _pair(pred, truth, 2)
    dp, dt = p - p.mean(), t - t.mean()
    sp, st = np.sqrt((dp**2).sum()), np.sqrt((dt**2).sum())
    if sp == 0 or st == 0:
        raise ValueError("correlation is undefined for a constant input")
    return float(np.clip((dp * dt).sum() / (sp * st), -1.0, 1.0))


def metric_table(estimates: np.ndarray, truth: np.ndarray, names: Sequence[str]) -> list[dict]:
    """Per-characteristic RMSE and CORR over entities (rows)."""
    est, tru = np.asarray(estimates, float), np.asarray(truth, float)
    if est.shape != tru.shape or est.shape[1] != len(names):
        raise ValueError("estimate/truth matrices and names disagree in shape")
    rows = []
    for j, name in enumerate(names):
        try:
            c = corr(est[:, j], tru[:, j])
        except ValueError:
            c = UNDEFINED
        rows.append({"characteristic": name, "rmse": rmse(est[:, j], tru[:, j]), "corr": c})
    return rows


def table_means(rows: Sequence[dict]) -> dict:
    return {
        "rmse": float(np.mean([r["rmse"] for r in rows])),
        "corr": float(np.nanmean([r["corr"] for r in rows])),
    }


def group_report(estimates: np.ndarray, truth: np.ndarray, names: Sequence[str], groups: Mapping[str, str]) -> dict:
    """Mean correlation per group plus two grand means.

    ``mean_of_groups`` averages the group means; ``mean_all`` averages every
    characteristic directly. They differ when groups have unequal sizes.
    """
    uncovered = [n for n in names if n not in groups]
    if uncovered:
        raise ValueError(f"group map does not cover {uncovered}")
    rows = metric_table(estimates, truth, names)
    by_group: dict[str, list[float]] = {}
    for row in rows:
        by_group.setdefault(groups[row["characteristic"]], []).append(row["corr"])
    group_means = {g: float(np.nanmean(v)) for g, v in sorted(by_group.items())}
    return {
        "groups": group_means,
        "mean_of_groups": float(np.mean(list(group_means.values()))),
        "mean_all": float(np.nanmean([r["corr"] for r in rows])),
    }


def pairwise_distances(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, float)
    diff = m[:, None, :] - m[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def seriate(dist: np.ndarray) -> np.ndarray:
    """Greedy nearest-neighbour chain from the medoid; ties go to the lower index."""
    n = dist.shape[0]
    current = int(np.argmin(dist.sum(axis=1)))
    order = [current]
    left = np.ones(n, dtype=bool)
    left[current] = False
    while left.any():
        cand = np.flatnonzero(left)
        current = int(cand[np.argmin(dist[current, cand])])
        order.append(current)
        left[current] = False
    return np.array(order)


def distance_matrices(z_matrix: np.ndarray, h_matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Characteristic-space and embedding-space distances, both reordered by the
    seriation of the characteristic matrix."""
    z, h = np.asarray(z_matrix, float), np.asarray(h_matrix, float)
    if z.ndim != 2 or h.ndim != 2 or z.shape[0] != h.shape[0]:
        raise ValueError("matrices must be 2-D with the same number of rows")
    if z.shape[0] < 2:
        raise ValueError("need at least 2 entities")
    dz, dh = pairwise_distances(z), pairwise_distances(h)
    order = seriate(dz)
    ix = np.ix_(order, order)
    return dz[ix], dh[ix], order


def embedding_char_correlation(h_matrix: np.ndarray, z_matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(D_z, H)`` Pearson correlations and the column ranking by descending mean |corr|.

    Entries involving a constant column are NaN; such embedding columns rank last.
    """
    h, z = np.asarray(h_matrix, float), np.asarray(z_matrix, float)
    if h.shape[0] != z.shape[0] or h.shape[0] < 2:
        raise ValueError("need matching row counts of at least 2")
    hc, zc = h - h.mean(0), z - z.mean(0)
    hn, zn = np.sqrt((hc**2).sum(0)), np.sqrt((zc**2).sum(0))
    with np.errstate(invalid="ignore", divide="ignore"):
        c = (zc.T @ hc) / np.outer(zn, hn)
    c[zn == 0, :] = UNDEFINED
    c[:, hn == 0] = UNDEFINED
    c = np.clip(c, -1.0, 1.0)
    finite = np.isfinite(c)
    score = np.where(finite.any(axis=0), np.where(finite, np.abs(c), 0.0).sum(0) / np.maximum(finite.sum(0), 1), -np.inf)
    ranking = np.argsort(-score, kind="stable")
    return c, ranking


@dataclass
class ExperimentReport:
    metrics: list[dict] = field(default_factory=list)
    groups: dict | None = None
    nse: dict = field(default_factory=dict)  # arm -> summary
    distance_z: np.ndarray | None = None
    distance_h: np.ndarray | None = None
    ordering: list[str] | None = None
    embedding_corr: np.ndarray | None = None
    embedding_ranking: np.ndarray | None = None
    char_names: tuple[str, ...] = ()
    provenance: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {"provenance": self.provenance, "nse": self.nse, **self.extra}
        if self.metrics:
            out["metrics"] = self.metrics
            out["metric_means"] = table_means(self.metrics)
        if self.groups is not None:
            out["groups"] = self.groups
        return out

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if self.metrics:
            with open(out / "metrics.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["characteristic", "rmse", "corr"])
                for r in self.metrics:
                    w.writerow([r["characteristic"], repr(r["rmse"]), repr(r["corr"])])
        if self.distance_z is not None:
            labels = self.ordering or [str(i) for i in range(len(self.distance_z))]
            for name, mat in (("distance_characteristics.csv", self.distance_z), ("distance_embeddings.csv", self.distance_h)):
                _write_matrix(out / name, mat, labels, labels)
        if self.embedding_corr is not None:
            cols = [f"dim_{k}" for k in self.embedding_ranking]
            _write_matrix(out / "embedding_correlation.csv", self.embedding_corr[:, self.embedding_ranking], list(self.char_names), cols)
        (out / "report.json").write_text(json.dumps(_jsonable(self.summary()), indent=2, sort_keys=True) + "\n")
        return out


def _write_matrix(path: Path, mat: np.ndarray, rows: Sequence[str], cols: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["", *cols])
        for label, row in zip(rows, mat):
            w.writerow([label, *(repr(float(v)) for v in row)])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj
