"""Entity-aware forward model: an LSTM whose input gate is set once from a static
conditioning vector (characteristics or embeddings), plus NSE evaluation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import neuralcore as nc
from .datahub import Dataset, NormalizationStats
from .errors import ConfigError, DataError, NumericError
from .trainer import DTYPES, coerce_fields

CONDITIONING_TAGS = ("measured", "corrupted", "imputed", "embedding", "none")


@dataclass(frozen=True)
class ForwardCellParams:
    w_f: torch.Tensor  # H x (D_x + H)
    w_g: torch.Tensor
    w_o: torch.Tensor
    b_f: torch.Tensor
    b_g: torch.Tensor
    b_o: torch.Tensor


@dataclass(frozen=True)
class ForwardParams:
    static_gate: nc.DenseParams  # D_cond -> H
    cell: ForwardCellParams
    head: nc.DenseParams  # H -> 1

    def __post_init__(self):
        h = self.static_gate.out_dim
        if self.cell.w_f.shape[0] != h or self.head.in_dim != h or self.head.out_dim != 1:
            raise nc.ContractError("forward model hidden sizes disagree")

    @property
    def hidden_size(self) -> int:
        return self.static_gate.out_dim

    @property
    def cond_dim(self) -> int:
        return self.static_gate.in_dim

    @property
    def driver_dim(self) -> int:
        return self.cell.w_f.shape[1] - self.hidden_size


@dataclass(frozen=True)
class ForwardConfig:
    hidden_size: int = 32
    learning_rate: float = 0.005
    steps: int = 300
    batch_entities: int = 32
    sequence_length: int = 365
    warmup: int = 90  # leading steps excluded from the loss and from NSE
    seed: int = 0
    grad_clip: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.sequence_length <= self.warmup:
            raise ConfigError("sequence_length must exceed warmup")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "ForwardConfig":
        return cls(**coerce_fields(cls, values))


@dataclass(frozen=True)
class ConditioningSource:
    tag: str
    payload: Mapping[str, np.ndarray]
    dim: int

    def __post_init__(self):
        if self.tag not in CONDITIONING_TAGS:
            raise ConfigError(f"unknown conditioning tag {self.tag!r}; expected one of {CONDITIONING_TAGS}")

    def vector(self, entity_id: str) -> np.ndarray:
        if self.tag == "none":
            return np.zeros(self.dim)
        if entity_id not in self.payload:
            raise DataError(f"no {self.tag} conditioning vector for entity {entity_id!r}")
        v = np.asarray(self.payload[entity_id], dtype=float)
        if v.shape != (self.dim,) or not np.isfinite(v).all():
            raise DataError(f"{self.tag} conditioning vector for {entity_id!r} is missing values or has the wrong size")
        return v

    def matrix(self, ids: Sequence[str]) -> np.ndarray:
        return np.stack([self.vector(i) for i in ids])

    @classmethod
    def none(cls, dim: int) -> "ConditioningSource":
        return cls("none", {}, dim)

    @classmethod
    def from_characteristics(cls, dataset: Dataset, tag: str = "measured", truth: bool = False) -> "ConditioningSource":
        """Stored characteristics; unavailable entries become NaN and are rejected on use."""
        payload = {
            r.id: (r.truth if truth else np.where(r.mask, r.characteristics, np.nan)) for r in dataset
        }
        return cls(tag, payload, len(dataset.char_names))

    @classmethod
    def from_vectors(cls, vectors: Mapping[str, np.ndarray], tag: str) -> "ConditioningSource":
        dims = {len(v) for v in vectors.values()}
        if len(dims) != 1:
            raise DataError("conditioning vectors must share one dimension")
        return cls(tag, dict(vectors), dims.pop())


def init_forward(seed: int, driver_dim: int, cond_dim: int, hidden: int, dtype=torch.float32) -> ForwardParams:
    rng = np.random.default_rng([seed, 104729])
    cell = nc.init_cell(rng, driver_dim, hidden, dtype)
    return ForwardParams(
        static_gate=nc.init_dense(rng, cond_dim, hidden, dtype),
        cell=ForwardCellParams(cell.w_f, cell.w_g, cell.w_o, cell.b_f, cell.b_g, cell.b_o),
        head=nc.init_dense(rng, hidden, 1, dtype),
    )


def _input_gate(params: ForwardParams, cond: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(params.static_gate(cond))


def ea_forward(
    params: ForwardParams,
    drivers: torch.Tensor,
    cond: torch.Tensor,
    fused: bool = True,
    return_input_gates: bool = False,
):
    """Predict the response ``(T,)`` / ``(B, T)`` from drivers ``(T, D_x)`` / ``(B, T, D_x)``.

    The input gate depends on ``cond`` only and is held fixed over time; the
    forget, candidate and output gates see ``[x_t; h_{t-1}]``.
    """
    x, squeeze = (drivers.unsqueeze(0), True) if drivers.dim() == 2 else (drivers, False)
    c_in = cond.unsqueeze(0) if cond.dim() == 1 else cond
    if x.dim() != 3 or x.shape[2] != params.driver_dim:
        raise nc.ContractError(f"drivers must have {params.driver_dim} columns, got shape {tuple(drivers.shape)}")
    if c_in.shape != (x.shape[0], params.cond_dim):
        raise nc.ContractError(f"conditioning must be ({x.shape[0]}, {params.cond_dim}), got {tuple(cond.shape)}")
    b, t_len, d = x.shape
    hidden = params.hidden_size
    cell = params.cell
    gate = _input_gate(params, c_in)
    if fused and not return_input_gates:
        # inputs [x_t; cond]: the i-gate sees only cond, f/g/o only x and h
        zeros_cx = x.new_zeros(hidden, c_in.shape[1])
        zeros_dx = x.new_zeros(hidden, d)
        w_ih = torch.cat(
            [
                torch.cat([zeros_dx, params.static_gate.weight], 1),
                torch.cat([cell.w_f[:, :d], zeros_cx], 1),
                torch.cat([cell.w_g[:, :d], zeros_cx], 1),
                torch.cat([cell.w_o[:, :d], zeros_cx], 1),
            ]
        )
        w_hh = torch.cat([x.new_zeros(hidden, hidden), cell.w_f[:, d:], cell.w_g[:, d:], cell.w_o[:, d:]])
        bias = torch.cat([params.static_gate.bias, cell.b_f, cell.b_g, cell.b_o])
        inputs = torch.cat([x, c_in[:, None, :].expand(b, t_len, -1)], dim=2)
        h0 = x.new_zeros(1, b, hidden)
        hs, _, _ = torch.lstm(inputs, (h0, h0), [w_ih, w_hh, bias, torch.zeros_like(bias)], True, 1, 0.0, False, False, True)
        gates = None
    else:
        xw = x @ torch.cat([cell.w_f[:, :d], cell.w_g[:, :d], cell.w_o[:, :d]]).T
        w_h = torch.cat([cell.w_f[:, d:], cell.w_g[:, d:], cell.w_o[:, d:]]).T
        bias = torch.cat([cell.b_f, cell.b_g, cell.b_o])
        h = x.new_zeros(b, hidden)
        c = x.new_zeros(b, hidden)
        out, gates = [], []
        for t in range(t_len):
            f, g, o = (xw[:, t] + h @ w_h + bias).split(hidden, dim=1)
            c = torch.sigmoid(f) * c + gate * torch.tanh(g)
            h = torch.sigmoid(o) * torch.tanh(c)
            out.append(h)
            gates.append(gate)
        hs = torch.stack(out, dim=1)
        gates = torch.stack(gates, dim=1)
    y = params.head(hs)[..., 0]
    if squeeze:
        y = y[0]
        gates = None if gates is None else gates[0]
    return (y, gates) if return_input_gates else y


def nse(predicted, observed) -> float:
    """Nash-Sutcliffe efficiency, ``1 - SSE / sum((obs - mean(obs))^2)``."""
    sim = np.asarray(predicted, dtype=float)
    obs = np.asarray(observed, dtype=float)
    if sim.shape != obs.shape or obs.ndim != 1 or obs.size < 2:
        raise ValueError("nse needs two equal-length series of at least 2 values")
    denom = float(((obs - obs.mean()) ** 2).sum())
    if denom == 0:
        raise ValueError("nse is undefined for a constant observed series")
    return 1.0 - float(((obs - sim) ** 2).sum()) / denom


def _sample_batch(dataset, ids, cond, n, length, bounds, rng, dtype):
    chosen = rng.choice(len(ids), size=n, replace=False)
    lo, hi = bounds
    xs, ys = [], []
    for k in chosen:
        rec = dataset[ids[k]]
        start = lo + int(rng.integers(0, hi - lo - length + 1))
        xs.append(rec.drivers[start : start + length])
        ys.append(rec.response[start : start + length])
    as_t = lambda a: torch.as_tensor(np.stack(a), dtype=dtype)  # noqa: E731
    return as_t(xs), as_t(ys), torch.as_tensor(cond[chosen], dtype=dtype)


def train_forward(
    dataset: Dataset,
    source: ConditioningSource,
    config: ForwardConfig,
    entity_ids: Sequence[str] | None = None,
    period=None,
) -> ForwardParams:
    """Minimize the MSE of the standardized response after the warm-up steps."""
    if not dataset.standardized:
        raise DataError("train_forward() expects a standardized dataset")
    ids = dataset.ids if entity_ids is None else list(entity_ids)
    cond = source.matrix(ids)
    bounds = dataset.resolve_period(period)
    length = min(config.sequence_length, bounds[1] - bounds[0])
    if length <= config.warmup:
        raise DataError("training period shorter than the warm-up")
    dtype = DTYPES[config.dtype]
    params = init_forward(config.seed, len(dataset.driver_names), source.dim, config.hidden_size, dtype)
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in nc.named_tensors(params).items()}
    optimizer = torch.optim.Adam(leaves.values(), lr=config.learning_rate)
    rng = np.random.default_rng([config.seed, 15485863])
    n = min(config.batch_entities, len(ids))
    for step in range(config.steps):
        x, y, c = _sample_batch(dataset, ids, cond, n, length, bounds, rng, dtype)
        pred = ea_forward(nc.replace_tensors(params, leaves), x, c)
        loss = ((pred[:, config.warmup :] - y[:, config.warmup :]) ** 2).mean()
        if not math.isfinite(float(loss.detach())):
            raise NumericError(f"forward model loss is non-finite at step {step}")
        optimizer.zero_grad()
        loss.backward()
        if config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(list(leaves.values()), config.grad_clip)
        optimizer.step()
    return nc.replace_tensors(params, {k: v.detach().clone() for k, v in leaves.items()})


@dataclass(frozen=True)
class ForwardEvaluation:
    entity_ids: list[str]
    dates: np.ndarray | None
    observed: np.ndarray  # (entities, T - warmup), physical units
    predicted: np.ndarray
    nse: np.ndarray

    def summary(self) -> dict:
        return {
            "mean_nse": float(np.mean(self.nse)),
            "median_nse": float(np.median(self.nse)),
            "entities": len(self.entity_ids),
        }


@torch.no_grad()
def evaluate_forward(
    params: ForwardParams,
    dataset: Dataset,
    source: ConditioningSource,
    entity_ids: Sequence[str] | None = None,
    period=None,
    warmup: int = 90,
) -> ForwardEvaluation:
    ids = dataset.ids if entity_ids is None else list(entity_ids)
    lo, hi = dataset.resolve_period(period)
    if hi - lo <= warmup + 1:
        raise DataError("evaluation period too short for the warm-up")
    dtype = params.head.weight.dtype
    x = torch.as_tensor(np.stack([dataset[i].drivers[lo:hi] for i in ids]), dtype=dtype)
    c = torch.as_tensor(source.matrix(ids), dtype=dtype)
    pred = ea_forward(params, x, c).double().numpy()[:, warmup:]
    obs = np.stack([dataset[i].response[lo + warmup : hi] for i in ids])
    if dataset.stats is not None:
        pred = dataset.stats.response_to_physical(pred)
        obs = dataset.stats.response_to_physical(obs)
    scores = np.array([nse(p, o) for p, o in zip(pred, obs)])
    dates = None if dataset.dates is None else dataset.dates[lo + warmup : hi]
    return ForwardEvaluation(ids, dates, obs, pred, scores)


def save_forward(
    path: str | Path,
    params: ForwardParams,
    config: ForwardConfig,
    tag: str,
    stats: NormalizationStats | None = None,
) -> None:
    meta = {"kind": "kgssl-forward", "config": asdict(config), "tag": tag, "cond_dim": params.cond_dim, "driver_dim": params.driver_dim}
    arrays = nc.params_to_arrays(params, prefix="param/")
    if stats is not None:
        arrays.update({f"stats/{k}": v for k, v in stats.to_arrays().items()})
    nc.write_container(path, arrays, meta)


def load_forward(path: str | Path) -> tuple[ForwardParams, ForwardConfig, str, NormalizationStats | None]:
    arrays, meta = nc.read_container(path)
    if meta.get("kind") != "kgssl-forward":
        raise DataError(f"{path}: not a forward-model file")
    config = ForwardConfig.from_mapping(meta["config"])
    template = init_forward(0, meta["driver_dim"], meta["cond_dim"], config.hidden_size, DTYPES[config.dtype])
    params = nc.params_from_arrays(template, arrays, prefix="param/")
    stat_arrays = {k[6:]: v for k, v in arrays.items() if k.startswith("stats/")}
    stats = NormalizationStats.from_arrays(stat_arrays) if stat_arrays else None
    return params, config, meta["tag"], stats


def write_predictions_csv(path: str | Path, evaluation: ForwardEvaluation) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity_id", "date", "observed", "predicted"])
        for k, eid in enumerate(evaluation.entity_ids):
            for t in range(evaluation.observed.shape[1]):
                date = str(evaluation.dates[t]) if evaluation.dates is not None else str(t)
                w.writerow([eid, date, repr(float(evaluation.observed[k, t])), repr(float(evaluation.predicted[k, t]))])


def write_metrics(out_dir: str | Path, evaluation: ForwardEvaluation, arm: str) -> None:
    out = Path(out_dir)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity_id", "nse"])
        for eid, score in zip(evaluation.entity_ids, evaluation.nse):
            w.writerow([eid, repr(float(score))])
    (out / "summary.json").write_text(json.dumps({"arm": arm, **evaluation.summary()}, indent=2, sort_keys=True) + "\n")
