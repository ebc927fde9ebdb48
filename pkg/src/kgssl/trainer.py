"""Optimization of the combined objective, seeded ensembles and hyperparameter grid search."""
from __future__ import annotations

import csv
import dataclasses
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple, Sequence

import numpy as np
import torch

from . import neuralcore as nc
from .datahub import Dataset, NormalizationStats, sample_pairs
from .errors import ConfigError, DataError, NumericError
from .losses import (
    ContrastiveBatch,
    LossWeights,
    contrastive_loss,
    pseudo_inverse_loss,
    reconstruction_loss,
    total_loss,
)

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class TrainConfig:
    lambda_rec: float = 1.0
    lambda_cont: float = 1.0
    lambda_inv: float = 1.0
    temperature: float = 0.5
    window: int = 365
    stride: int = 183
    hidden_size: int = 64  # also the embedding size
    inverse_hidden: int = 0  # 0 -> hidden_size
    activation: str = "relu"
    batch_entities: int = 100
    learning_rate: float = 0.001
    epochs: int = 30
    steps_per_epoch: int = 0  # 0 -> ceil(entities / batch_entities)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    candidate_activation: str = "tanh"
    grad_clip: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.window < 1 or self.stride < 1:
            raise ConfigError("window and stride must be >= 1")
        if self.batch_entities < 1:
            raise ConfigError("batch_entities must be >= 1")
        if self.hidden_size < 1 or self.inverse_hidden < 0:
            raise ConfigError("hidden sizes must be positive")
        if min(self.lambda_rec, self.lambda_cont, self.lambda_inv) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be >= 0")
        if self.candidate_activation not in nc.CANDIDATE_ACTIVATIONS:
            raise ConfigError(f"candidate_activation must be one of {nc.CANDIDATE_ACTIVATIONS}")
        if self.activation not in nc.HEAD_ACTIVATIONS:
            raise ConfigError(f"activation must be one of {nc.HEAD_ACTIVATIONS}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_rec, self.lambda_cont, self.lambda_inv)

    @property
    def embedding_size(self) -> int:
        return self.hidden_size

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "TrainConfig":
        return cls(**coerce_fields(cls, values))


def coerce_fields(cls, values: Mapping[str, object]) -> dict:
    """Convert string values (from flat config files) to the dataclass field types."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in values.items():
        if key not in fields:
            raise ConfigError(f"unknown {cls.__name__} key {key!r}")
        default = fields[key].default
        try:
            if isinstance(default, tuple):
                items = raw.split(",") if isinstance(raw, str) else list(raw)
                out[key] = tuple(type(default[0])(str(x).strip()) if default else x for x in items if str(x).strip())
            elif isinstance(default, bool):
                out[key] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes")
            elif isinstance(default, (int, float)):
                out[key] = type(default)(float(raw)) if type(default) is int else float(raw)
            else:
                out[key] = raw
        except (TypeError, ValueError):
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
    return out


def read_flat_config(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def write_flat_config(path: str | Path, values: Mapping[str, object]) -> None:
    lines = []
    for k, v in values.items():
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


class LossTerms(NamedTuple):
    total: torch.Tensor
    reconstruction: torch.Tensor
    contrastive: torch.Tensor
    inverse: torch.Tensor


def batch_losses(
    params: nc.ModelParams,
    anchors: torch.Tensor,
    positives: torch.Tensor,
    z: torch.Tensor,
    mask: torch.Tensor,
    config: TrainConfig,
    fused: bool = True,
) -> LossTerms:
    """Evaluate every term of the objective on one batch of N window pairs."""
    n, width = anchors.shape[0], anchors.shape[1]
    seqs = torch.cat([anchors, positives], dim=0)
    cand = config.candidate_activation
    h = nc.encode(params.encoder, seqs, candidate=cand, fused=fused)
    rec = reconstruction_loss(nc.decode(params.decoder, h, width, candidate=cand, fused=fused), seqs)
    cont = contrastive_loss(ContrastiveBatch(h[:n], h[n:], config.temperature))
    z_hat = nc.inverse_head(params.inverse_head, h)
    inv = pseudo_inverse_loss(z_hat, torch.cat([z, z]), torch.cat([mask, mask]))
    return LossTerms(total_loss(config.weights, rec, cont, inv), rec, cont, inv)


def pairs_to_tensors(pairs, dataset: Dataset, dtype) -> tuple[torch.Tensor, ...]:
    anchors = torch.as_tensor(np.stack([p.anchor for p in pairs]), dtype=dtype)
    positives = torch.as_tensor(np.stack([p.positive for p in pairs]), dtype=dtype)
    recs = [dataset[p.entity_id] for p in pairs]
    mask = torch.as_tensor(np.stack([r.mask for r in recs]))
    z = torch.as_tensor(np.stack([np.where(r.mask, r.characteristics, 0.0) for r in recs]), dtype=dtype)
    return anchors, positives, z, mask


@dataclass(frozen=True)
class Checkpoint:
    params: nc.ModelParams
    stats: NormalizationStats
    config: TrainConfig
    seed: int
    driver_names: tuple[str, ...]
    char_names: tuple[str, ...]
    loss_trace: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))  # total, rec, cont, inv

    KIND = "kgssl-checkpoint"

    def save(self, path: str | Path) -> None:
        arrays = nc.params_to_arrays(self.params, prefix="param/")
        arrays.update({f"stats/{k}": v for k, v in self.stats.to_arrays().items()})
        arrays["loss_trace"] = np.asarray(self.loss_trace, dtype=np.float64)
        meta = {
            "kind": self.KIND,
            "config": self.config.to_dict(),
            "seed": self.seed,
            "driver_names": list(self.driver_names),
            "char_names": list(self.char_names),
        }
        nc.write_container(path, arrays, meta)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        arrays, meta = nc.read_container(path)
        if meta.get("kind") != cls.KIND:
            raise DataError(f"{path}: not a KGSSL checkpoint")
        config = TrainConfig.from_mapping(meta["config"])
        template = nc.init_model(
            0,
            len(meta["driver_names"]) + 1,
            config.hidden_size,
            len(meta["char_names"]),
            config.inverse_hidden or None,
            config.activation,
            dtype=config.torch_dtype,
        )
        params = nc.params_from_arrays(template, arrays, prefix="param/")
        stats = NormalizationStats.from_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("stats/")})
        return cls(
            params=params,
            stats=stats,
            config=config,
            seed=int(meta["seed"]),
            driver_names=tuple(meta["driver_names"]),
            char_names=tuple(meta["char_names"]),
            loss_trace=arrays["loss_trace"],
        )


def _training_setup(dataset: Dataset, entity_ids: Sequence[str], period, config: TrainConfig):
    if not dataset.standardized:
        raise DataError("train() expects a standardized dataset (see fit_normalize)")
    entity_ids = list(entity_ids)
    if not entity_ids:
        raise DataError("no training entities")
    lo, hi = dataset.resolve_period(period)
    if hi - lo < config.window:
        raise DataError(f"training period has {hi - lo} steps, shorter than window {config.window}")
    return entity_ids, (lo, hi)


def initial_params(dataset: Dataset, config: TrainConfig, seed: int) -> nc.ModelParams:
    return nc.init_model(
        seed,
        len(dataset.driver_names) + 1,
        config.hidden_size,
        len(dataset.char_names),
        config.inverse_hidden or None,
        config.activation,
        dtype=config.torch_dtype,
    )


def train(
    dataset: Dataset,
    entity_ids: Sequence[str],
    period,
    config: TrainConfig,
    seed: int | None = None,
    log_path: str | Path | None = None,
) -> Checkpoint:
    """Fit encoder, decoder and inverse head with Adam; one sampled batch of N pairs per step."""
    entity_ids, period = _training_setup(dataset, entity_ids, period, config)
    seed = config.seeds[0] if seed is None else int(seed)
    n = min(config.batch_entities, len(entity_ids))
    params = initial_params(dataset, config, seed)
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in nc.named_tensors(params).items()}
    optimizer = torch.optim.Adam(leaves.values(), lr=config.learning_rate)
    rng = np.random.default_rng([seed, 7919])
    steps_per_epoch = config.steps_per_epoch or math.ceil(len(entity_ids) / n)
    n_steps = config.epochs * steps_per_epoch
    trace = np.zeros((n_steps, 4))
    for step in range(n_steps):
        pairs = sample_pairs(dataset, entity_ids, n, config.window, rng, period)
        batch = pairs_to_tensors(pairs, dataset, config.torch_dtype)
        terms = batch_losses(nc.replace_tensors(params, leaves), *batch, config)
        values = [float(t.detach()) for t in terms]
        if not all(math.isfinite(v) for v in values):
            raise NumericError(
                f"non-finite loss at step {step}: total={values[0]} rec={values[1]} cont={values[2]} inv={values[3]}"
            )
        trace[step] = values
        optimizer.zero_grad()
        terms.total.backward()
        if config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(list(leaves.values()), config.grad_clip)
        optimizer.step()
        if step % 50 == 0:
            log.debug("seed %d step %d/%d loss %.4f", seed, step, n_steps, values[0])
    final = nc.replace_tensors(params, {k: v.detach().clone() for k, v in leaves.items()})
    ckpt = Checkpoint(final, dataset.stats, config, seed, dataset.driver_names, dataset.char_names, trace)
    if log_path is not None:
        write_training_log(log_path, trace)
    return ckpt


def write_training_log(path: str | Path, trace: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss_total", "loss_rec", "loss_cont", "loss_inv"])
        for step, row in enumerate(trace):
            w.writerow([step, *(repr(float(v)) for v in row)])


def train_ensemble(
    dataset: Dataset,
    entity_ids: Sequence[str],
    period,
    config: TrainConfig,
    log_dir: str | Path | None = None,
) -> list[Checkpoint]:
    """One independent training run per seed in ``config.seeds``."""
    if len(set(config.seeds)) != len(config.seeds):
        raise ConfigError(f"ensemble seeds must be distinct, got {config.seeds}")
    out = []
    for seed in config.seeds:
        log_path = None if log_dir is None else Path(log_dir) / f"train_log_seed{seed}.csv"
        out.append(train(dataset, entity_ids, period, config, seed=seed, log_path=log_path))
    return out


# ----------------------------------------------------------------------------
# Grid search

GRID_TO_CONFIG = {
    "embedding_dim": "hidden_size",
    "learning_rate": "learning_rate",
    "lambda_rec": "lambda_rec",
    "lambda_cont": "lambda_cont",
    "lambda_inv": "lambda_inv",
    "batch_size": "batch_entities",
    "temperature": "temperature",
}


@dataclass(frozen=True)
class HyperGrid:
    embedding_dim: tuple[int, ...] = (32, 64, 128, 256)
    learning_rate: tuple[float, ...] = (0.0005, 0.001, 0.003, 0.005, 0.05)
    lambda_rec: tuple[float, ...] = (0.01, 0.1, 1, 10)
    lambda_cont: tuple[float, ...] = (1,)
    lambda_inv: tuple[float, ...] = (0.1, 1, 10)
    batch_size: tuple[int, ...] = (100, 200)
    temperature: tuple[float, ...] = (0.1, 0.5, 0.7, 1)

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if len(getattr(self, f.name)) == 0:
                raise ConfigError(f"grid axis {f.name!r} is empty")

    def __len__(self) -> int:
        return math.prod(len(getattr(self, f.name)) for f in dataclasses.fields(self))

    def points(self) -> Iterator[dict]:
        """Lazily enumerate grid points in lexicographic axis order."""
        names = [f.name for f in dataclasses.fields(self)]
        for values in itertools.product(*(getattr(self, n) for n in names)):
            yield dict(zip(names, values))

    def apply(self, base: TrainConfig, point: Mapping) -> TrainConfig:
        return base.replace(**{GRID_TO_CONFIG[k]: v for k, v in point.items()})


@dataclass(frozen=True)
class GridResult:
    point: dict
    config: TrainConfig
    rmse: float


def grid_search(
    dataset: Dataset,
    grid: HyperGrid,
    entity_ids: Sequence[str],
    train_period,
    base_config: TrainConfig,
    validation_days: int = 365,
    max_points: int | None = None,
    sample_seed: int = 0,
) -> tuple[TrainConfig, list[GridResult]]:
    """Pick the grid point with the lowest characteristic RMSE on the training entities
    over a validation tail held out from the training period. Ties keep the earlier point."""
    from .inference import estimate_characteristics

    lo, hi = dataset.resolve_period(train_period)
    fit_period, val_period = (lo, hi - validation_days), (hi - validation_days, hi)
    if fit_period[1] <= fit_period[0]:
        raise DataError("training period too short to hold out a validation tail")
    total = len(grid)
    keep = None
    if max_points is not None and max_points < total:
        keep = set(np.random.default_rng(sample_seed).choice(total, size=max_points, replace=False).tolist())
    results: list[GridResult] = []
    for index, point in enumerate(grid.points()):
        if keep is not None and index not in keep:
            continue
        config = grid.apply(base_config, point)
        ckpt = train(dataset, entity_ids, fit_period, config, seed=config.seeds[0])
        sq, count = 0.0, 0
        for eid in entity_ids:
            rec = dataset[eid]
            est = estimate_characteristics([ckpt], rec, val_period)
            err = (est.estimate - rec.characteristics)[rec.mask]
            sq += float((err**2).sum())
            count += int(rec.mask.sum())
        rmse = math.sqrt(sq / count) if count else float("nan")
        log.info("grid point %d %s rmse=%.4f", index, point, rmse)
        results.append(GridResult(point, config, rmse))
    if not results:
        raise ConfigError("grid search evaluated no points")
    best = min(results, key=lambda r: (not math.isfinite(r.rmse), r.rmse if math.isfinite(r.rmse) else 0.0))
    return best.config, results
