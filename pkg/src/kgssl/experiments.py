"""Named end-to-end experiment presets.

Each preset builds (or ingests) a dataset, trains one KGSSL model per seed,
estimates characteristics for held-out entities and writes every raw
prediction next to the metrics derived from it, so the report can be
recomputed from the run directory alone.
"""
from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import __version__
from . import analysis
from .datahub import (
    CorruptionSpec,
    Dataset,
    SyntheticConfig,
    camels_groups,
    corrupt,
    fit_normalize,
    ingest_csv,
    mask_missing,
    parse_period,
    synthesize,
)
from .errors import ConfigError, DataError, NumericError
from .forwardmodel import (
    ConditioningSource,
    ForwardConfig,
    evaluate_forward,
    save_forward,
    train_forward,
    write_metrics,
    write_predictions_csv,
)
from .inference import (
    CharacteristicEstimate,
    denoise_or_impute,
    embed_entity,
    write_embeddings_csv,
    write_estimates_csv,
)
from .trainer import Checkpoint, TrainConfig, coerce_fields, train, write_training_log

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "KGSSL_DATA_ROOT"


@dataclass(frozen=True)
class ExperimentSettings:
    """Everything a preset needs besides the training and forward configs."""

    n_entities: int = 200
    n_days: int = 1460
    n_test: int = 50
    data_seed: int = 0
    split_seed: int = 0
    noise_fraction: float = 0.0
    noise_multiple: float = 2.0
    missing_fraction: float = 0.0
    corruption_seed: int = 1
    train_days: int = 1095  # forward preset: first part trains, the rest tests
    embedding_years: int = 0  # forward preset: 0 -> whole training period
    eval_noise: float = 1.0  # forward preset: sigma multiple added to held-out z
    warmup: int = 90
    train_period: str = ""  # dated runs (external data), "start:stop"
    test_period: str = ""


def synthetic_train_config(**changes) -> TrainConfig:
    base = TrainConfig(
        window=180,
        stride=180,
        hidden_size=32,
        batch_entities=32,
        learning_rate=0.005,
        lambda_rec=0.01,
        epochs=300,
        seeds=(0, 1, 2),
    )
    return base.replace(**changes)


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    runner: Callable
    settings: ExperimentSettings = ExperimentSettings()
    train_config: TrainConfig = field(default_factory=synthetic_train_config)
    forward_config: ForwardConfig = ForwardConfig()


class StageFailure(Exception):
    pass


@contextlib.contextmanager
def stage(name: str):
    """Prefix errors raised inside with the stage name, keeping their type."""
    try:
        yield
    except (ConfigError, DataError, NumericError) as exc:
        raise type(exc)(f"[{name}] {exc}") from exc
    except Exception as exc:  # noqa: BLE001
        raise StageFailure(f"[{name}] {type(exc).__name__}: {exc}") from exc


@dataclass
class RunContext:
    preset: Preset
    settings: ExperimentSettings
    train_config: TrainConfig
    forward_config: ForwardConfig
    out: Path

    def provenance(self) -> dict:
        body = {
            "preset": self.preset.name,
            "settings": asdict(self.settings),
            "train_config": self.train_config.to_dict(),
            "forward_config": asdict(self.forward_config),
            "package_version": __version__,
        }
        digest = hashlib.sha1(json.dumps(body, sort_keys=True).encode()).hexdigest()[:12]
        return {**body, "seeds": list(self.train_config.seeds), "version_id": f"{__version__}+{digest}"}


# ---------------------------------------------------------------------------
# shared stages


def _split(ids: Sequence[str], n_test: int, seed: int) -> tuple[list[str], list[str]]:
    if not 0 < n_test < len(ids):
        raise ConfigError(f"n_test must lie in (0, {len(ids)})")
    perm = np.random.default_rng([seed, 31]).permutation(len(ids))
    test = sorted(ids[k] for k in perm[:n_test])
    held = set(test)
    return [i for i in ids if i not in held], test


def _synthetic(ctx: RunContext) -> tuple[Dataset, list[str], list[str]]:
    s = ctx.settings
    with stage("synthesize"):
        raw = synthesize(SyntheticConfig(n_entities=s.n_entities, n_days=s.n_days, seed=s.data_seed))
    train_ids, test_ids = _split(raw.ids, s.n_test, s.split_seed)
    with stage("normalize"):
        std, _ = fit_normalize(raw, train_ids)
    return std, train_ids, test_ids


def _apply_corruption(ctx: RunContext, std: Dataset, train_ids: list[str]) -> Dataset:
    s = ctx.settings
    with stage("corrupt"):
        if s.noise_fraction > 0:
            std = corrupt(std, CorruptionSpec("noise", s.noise_fraction, s.noise_multiple, s.corruption_seed), train_ids)
        if s.missing_fraction > 0:
            std = mask_missing(std, s.missing_fraction, s.corruption_seed, train_ids)
    return std


def _train_seeds(ctx: RunContext, dataset: Dataset, train_ids, period, config: TrainConfig | None = None) -> list[Checkpoint]:
    config = config or ctx.train_config
    (ctx.out / "checkpoints").mkdir(parents=True, exist_ok=True)
    out = []
    for seed in config.seeds:
        with stage(f"train seed {seed}"):
            ckpt = train(dataset, train_ids, period, config, seed=seed)
        ckpt.save(ctx.out / "checkpoints" / f"seed{seed}.kgssl")
        write_training_log(ctx.out / "checkpoints" / f"train_log_seed{seed}.csv", ckpt.loss_trace)
        out.append(ckpt)
    return out


def _truth_csv(path: Path, dataset: Dataset, ids: Sequence[str], which: str = "truth") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity_id", *dataset.char_names])
        for eid in ids:
            rec = dataset[eid]
            z = rec.truth if which == "truth" else np.where(rec.mask, rec.characteristics, np.nan)
            w.writerow([eid, *(repr(float(v)) for v in z)])


def _matrix(estimates: Sequence[CharacteristicEstimate]) -> np.ndarray:
    return np.stack([e.estimate for e in estimates])


def _seed_metrics(estimates, truth, names) -> dict:
    rows = analysis.metric_table(_matrix(estimates), truth, names)
    return {"per_characteristic": rows, **{f"mean_{k}": v for k, v in analysis.table_means(rows).items()}}


def _estimate_per_seed(ctx: RunContext, ckpts, dataset, ids, period, tag: str):
    """Per-seed and pooled-ensemble estimates for ``ids``; CSVs written for each."""
    per_seed = {}
    for ckpt in ckpts:
        with stage(f"estimate seed {ckpt.seed}"):
            est = denoise_or_impute([ckpt], dataset, ids, period)
        write_estimates_csv(ctx.out / f"estimates_{tag}_seed{ckpt.seed}.csv", est)
        per_seed[ckpt.seed] = est
    with stage("estimate ensemble"):
        ensemble = denoise_or_impute(ckpts, dataset, ids, period)
    write_estimates_csv(ctx.out / f"estimates_{tag}_ensemble.csv", ensemble)
    write_embeddings_csv(ctx.out / f"embeddings_{tag}_ensemble.csv", ensemble)
    return per_seed, ensemble


def _median_seed(values: Mapping[int, float]) -> float:
    return float(np.median(list(values.values())))


# ---------------------------------------------------------------------------
# runners


def run_identifiability(ctx: RunContext) -> analysis.ExperimentReport:
    """Train on (possibly corrupted) training entities, reconstruct held-out ones."""
    std, train_ids, test_ids = _synthetic(ctx)
    data = _apply_corruption(ctx, std, train_ids)
    ckpts = _train_seeds(ctx, data, train_ids, None)
    _truth_csv(ctx.out / "truth_test.csv", data, test_ids)
    truth = data.characteristic_matrix(test_ids, truth=True)
    per_seed, ensemble = _estimate_per_seed(ctx, ckpts, data, test_ids, None, "test")
    seed_metrics = {s: _seed_metrics(e, truth, data.char_names) for s, e in per_seed.items()}
    extra = {
        "test_entities": test_ids,
        "per_seed": {str(s): m for s, m in seed_metrics.items()},
        "median_seed_corr": _median_seed({s: m["mean_corr"] for s, m in seed_metrics.items()}),
        "median_seed_rmse": _median_seed({s: m["mean_rmse"] for s, m in seed_metrics.items()}),
    }
    touched = [eid for eid in train_ids if data[eid].characteristics_true is not None]
    if touched:
        extra["corrupted_entities"] = len(touched)
        extra["denoising"] = _denoising(ctx, ckpts, data, touched)
    h = np.stack([e.embedding for e in ensemble])
    dz, dh, order = analysis.distance_matrices(truth, h)
    corr_mat, ranking = analysis.embedding_char_correlation(h, truth)
    return analysis.ExperimentReport(
        metrics=analysis.metric_table(_matrix(ensemble), truth, data.char_names),
        nse={},
        distance_z=dz,
        distance_h=dh,
        ordering=[test_ids[k] for k in order],
        embedding_corr=corr_mat,
        embedding_ranking=ranking,
        char_names=data.char_names,
        extra=extra,
    )


def _denoising(ctx: RunContext, ckpts, data: Dataset, touched: list[str]) -> dict:
    """Reconstruction vs stored (corrupted or missing) values on the touched training entities."""
    _truth_csv(ctx.out / "truth_corrupted_entities.csv", data, touched)
    _truth_csv(ctx.out / "stored_corrupted_entities.csv", data, touched, which="stored")
    truth = data.characteristic_matrix(touched, truth=True)
    stored = np.stack([np.where(data[e].mask, data[e].characteristics, np.nan) for e in touched])
    per_seed = {}
    for ckpt in ckpts:
        with stage(f"denoise seed {ckpt.seed}"):
            est = denoise_or_impute([ckpt], data, touched)
        write_estimates_csv(ctx.out / f"estimates_corrupted_seed{ckpt.seed}.csv", est)
        rec = _matrix(est)
        per_seed[ckpt.seed] = {
            "rmse_reconstructed": float(np.mean([analysis.rmse(rec[:, j], truth[:, j]) for j in range(truth.shape[1])])),
            "corr_reconstructed": float(np.mean([analysis.corr(rec[:, j], truth[:, j]) for j in range(truth.shape[1])])),
        }
    out = {"per_seed": {str(s): v for s, v in per_seed.items()}}
    out["median_rmse_reconstructed"] = _median_seed({s: v["rmse_reconstructed"] for s, v in per_seed.items()})
    if np.isfinite(stored).all():
        out["rmse_corrupted"] = float(np.mean([analysis.rmse(stored[:, j], truth[:, j]) for j in range(truth.shape[1])]))
    return out


def run_unsupervised(ctx: RunContext) -> analysis.ExperimentReport:
    """Self-supervised terms only; embeddings compared against the hidden characteristics."""
    std, train_ids, test_ids = _synthetic(ctx)
    config = ctx.train_config.replace(lambda_inv=0.0)
    ckpts = _train_seeds(ctx, std, std.ids, None, config)
    ids = std.ids
    with stage("embed"):
        ensemble = denoise_or_impute(ckpts, std, ids)
    write_embeddings_csv(ctx.out / "embeddings_all_ensemble.csv", ensemble)
    _truth_csv(ctx.out / "truth_all.csv", std, ids)
    truth = std.characteristic_matrix(ids, truth=True)
    per_seed = {}
    for ckpt in ckpts:
        h = np.stack([embed_entity(ckpt, std[eid])[0] for eid in ids])
        c, _ = analysis.embedding_char_correlation(h, truth)
        per_seed[str(ckpt.seed)] = float(np.nanmean(np.nanmax(np.abs(c), axis=1)))
    h = np.stack([e.embedding for e in ensemble])
    dz, dh, order = analysis.distance_matrices(truth, h)
    corr_mat, ranking = analysis.embedding_char_correlation(h, truth)
    return analysis.ExperimentReport(
        distance_z=dz,
        distance_h=dh,
        ordering=[ids[k] for k in order],
        embedding_corr=corr_mat,
        embedding_ranking=ranking,
        char_names=std.char_names,
        extra={"best_abs_embedding_corr_per_seed": per_seed, "distance_rank_corr": _distance_agreement(dz, dh)},
    )


def _distance_agreement(dz: np.ndarray, dh: np.ndarray) -> float:
    iu = np.triu_indices(len(dz), k=1)
    return analysis.corr(dz[iu], dh[iu])


def run_forward(ctx: RunContext) -> analysis.ExperimentReport:
    """Forward-model arms on held-out entities over the test years.

    Arms: no conditioning, KGSSL embeddings (self-supervised only, same seed as
    the forward model), clean characteristics, and the clean-trained model
    evaluated with noisy held-out characteristics.
    """
    s = ctx.settings
    std, train_ids, test_ids = _synthetic(ctx)
    n = std.records[0].length
    if not 0 < s.train_days < n:
        raise ConfigError(f"train_days must lie in (0, {n})")
    train_period = (0, s.train_days)
    test_period = (s.train_days - s.warmup, n)
    emb_days = s.train_days if s.embedding_years <= 0 else min(365 * s.embedding_years, s.train_days)
    kgssl_config = ctx.train_config.replace(lambda_inv=0.0)
    ckpts = _train_seeds(ctx, std, train_ids, train_period, kgssl_config)
    fconf = replace(ctx.forward_config, warmup=s.warmup)
    d_z = len(std.char_names)
    clean = ConditioningSource.from_characteristics(std, "measured", truth=True)
    noise_rng = np.random.default_rng([s.corruption_seed, 4099])
    noisy = ConditioningSource.from_vectors(
        {eid: clean.vector(eid) + noise_rng.normal(0.0, s.eval_noise, d_z) for eid in test_ids}, "corrupted"
    )
    arms: dict[str, dict[int, float]] = {}
    for ckpt in ckpts:
        seed = ckpt.seed
        with stage(f"embed seed {seed}"):
            emb = {eid: embed_entity(ckpt, std[eid], (0, emb_days))[0] for eid in std.ids}
        sources = {
            "none": ConditioningSource.none(d_z),
            "embedding": ConditioningSource.from_vectors(emb, "embedding"),
            "measured": clean,
        }
        fseed = replace(fconf, seed=seed)
        for arm, source in sources.items():
            with stage(f"forward-train {arm} seed {seed}"):
                params = train_forward(std, source, fseed, train_ids, train_period)
            arm_dir = ctx.out / "forward" / f"{arm}_seed{seed}"
            arm_dir.mkdir(parents=True, exist_ok=True)
            save_forward(arm_dir / "model.kgfwd", params, fseed, source.tag, std.stats)
            evals = {arm: source}
            if arm == "measured":
                evals["measured_noisy"] = noisy
            for label, src in evals.items():
                with stage(f"forward-eval {label} seed {seed}"):
                    ev = evaluate_forward(params, std, src, test_ids, test_period, s.warmup)
                d = ctx.out / "forward" / f"{label}_seed{seed}"
                d.mkdir(parents=True, exist_ok=True)
                write_predictions_csv(d / "predictions.csv", ev)
                write_metrics(d, ev, label)
                arms.setdefault(label, {})[seed] = float(np.median(ev.nse))
    nse = {
        arm: {"median_nse_per_seed": {str(k): v for k, v in vals.items()}, "median_over_seeds": _median_seed(vals)}
        for arm, vals in arms.items()
    }
    return analysis.ExperimentReport(nse=nse, extra={"test_entities": test_ids})


def run_camels(ctx: RunContext) -> analysis.ExperimentReport:
    """External-data table run; needs forcing/ and attributes.csv under the data root."""
    root = os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise DataError(f"set {DATA_ROOT_ENV} to a directory holding forcing/ and attributes.csv")
    s = ctx.settings
    with stage("ingest"):
        raw = ingest_csv(Path(root) / "forcing", Path(root) / "attributes.csv", "camels")
    train_ids, test_ids = _split(raw.ids, s.n_test, s.split_seed)
    train_period = parse_period(s.train_period) or None
    test_period = parse_period(s.test_period) or None
    with stage("normalize"):
        std, _ = fit_normalize(raw, train_ids, raw.resolve_period(train_period) if train_period else None)
    ckpts = _train_seeds(ctx, std, train_ids, train_period)
    truth = std.characteristic_matrix(test_ids, truth=True)
    _, ensemble = _estimate_per_seed(ctx, ckpts, std, test_ids, test_period, "test")
    est = _matrix(ensemble)
    ok = np.isfinite(truth).all(axis=1)
    return analysis.ExperimentReport(
        metrics=analysis.metric_table(est[ok], truth[ok], std.char_names),
        groups=analysis.group_report(est[ok], truth[ok], std.char_names, camels_groups()),
        char_names=std.char_names,
        extra={"test_entities": test_ids},
    )


PRESETS: dict[str, Preset] = {
    p.name: p
    for p in (
        Preset("synthetic-clean", "clean characteristics, held-out reconstruction", run_identifiability),
        Preset(
            "noise50",
            "half of the training entities noised (2 sigma)",
            run_identifiability,
            ExperimentSettings(noise_fraction=0.5),
        ),
        Preset(
            "noise90",
            "90% of the training entities noised (2 sigma)",
            run_identifiability,
            ExperimentSettings(noise_fraction=0.9),
        ),
        Preset(
            "missing",
            "half of the training entities without characteristics",
            run_identifiability,
            ExperimentSettings(missing_fraction=0.5),
        ),
        Preset("unsupervised", "self-supervised embeddings vs hidden characteristics", run_unsupervised),
        Preset(
            "forward",
            "forward-model conditioning arms",
            run_forward,
            forward_config=ForwardConfig(steps=1000),
        ),
        Preset(
            "camels-table1",
            f"external CAMELS-format data under ${DATA_ROOT_ENV}",
            run_camels,
            ExperimentSettings(n_test=131, train_period="2001-10-01:2008-10-01", test_period="1989-10-01:1999-10-01"),
            TrainConfig(),
        ),
    )
}


def _split_overrides(overrides: Mapping[str, object]):
    setting_keys = {f.name for f in fields(ExperimentSettings)}
    train_keys = {f.name for f in fields(TrainConfig)}
    s, t, f = {}, {}, {}
    for key, value in overrides.items():
        if key.startswith("forward_"):
            f[key[len("forward_") :]] = value
        elif key in setting_keys:
            s[key] = value
        elif key in train_keys:
            t[key] = value
        else:
            raise ConfigError(f"unknown experiment key {key!r}")
    return s, t, f


def run_experiment(
    preset: str,
    out_dir: str | Path,
    overrides: Mapping[str, object] | None = None,
) -> analysis.ExperimentReport:
    """Run a named preset and write all artifacts under ``out_dir``.

    ``overrides`` holds flat keys: settings and training keys by name,
    forward-model keys prefixed with ``forward_``.
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; available: {', '.join(sorted(PRESETS))}")
    p = PRESETS[preset]
    s, t, f = _split_overrides(overrides or {})
    settings = ExperimentSettings(**{**asdict(p.settings), **coerce_fields(ExperimentSettings, s)})
    train_config = TrainConfig.from_mapping({**p.train_config.to_dict(), **t})
    forward_config = ForwardConfig.from_mapping({**asdict(p.forward_config), **f})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ctx = RunContext(p, settings, train_config, forward_config, out)
    report = p.runner(ctx)
    report.provenance = ctx.provenance()
    report.write(out)
    (out / "provenance.json").write_text(json.dumps(report.provenance, indent=2, sort_keys=True) + "\n")
    return report
