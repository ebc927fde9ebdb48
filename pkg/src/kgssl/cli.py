"""Command-line entry point (``kgssl``).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, analysis
from .datahub import (
    CorruptionSpec,
    Dataset,
    SyntheticConfig,
    apply_normalization,
    camels_groups,
    corrupt,
    fit_normalize,
    ingest_csv,
    invert_normalization,
    mask_missing,
    parse_period,
    read_attributes,
    synthesize,
    write_dataset,
)
from .errors import ConfigError, DataError, NumericError
from .neuralcore import ContractError
from .experiments import DATA_ROOT_ENV, PRESETS, StageFailure, run_experiment
from .forwardmodel import (
    ConditioningSource,
    ForwardConfig,
    evaluate_forward,
    load_forward,
    save_forward,
    train_forward,
    write_metrics,
    write_predictions_csv,
)
from .inference import (
    denoise_or_impute,
    read_embeddings_csv,
    read_estimates_csv,
    write_embeddings_csv,
    write_estimates_csv,
)
from .trainer import Checkpoint, HyperGrid, TrainConfig, grid_search, read_flat_config, train, write_flat_config, write_training_log

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
log = logging.getLogger("kgssl")


# ---------------------------------------------------------------------------
# helpers


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config_values(args, keys) -> dict:
    """Flat config-file entries restricted to ``keys``; unknown keys are left for other consumers."""
    if not args.config:
        return {}
    values = read_flat_config(args.config)
    return {k: v for k, v in values.items() if k in keys}


def _train_config(args) -> TrainConfig:
    keys = {f.name for f in fields(TrainConfig)}
    config = TrainConfig.from_mapping(_config_values(args, keys))
    if args.seed is not None:
        config = config.replace(seeds=(args.seed,))
    return config


def _forward_config(args) -> ForwardConfig:
    keys = {f"forward_{f.name}" for f in fields(ForwardConfig)}
    values = {k[len("forward_") :]: v for k, v in _config_values(args, keys).items()}
    config = ForwardConfig.from_mapping(values)
    if args.seed is not None:
        config = ForwardConfig(**{**asdict(config), "seed": args.seed})
    return config


def _data_dir(args) -> Path:
    root = args.data or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ConfigError(f"no data directory: pass --data or set {DATA_ROOT_ENV}")
    return Path(root)


def _load(args) -> Dataset:
    root = _data_dir(args)
    truth = root / "attributes_truth.csv"
    return ingest_csv(
        root / "forcing",
        root / "attributes.csv",
        characteristic_names=getattr(args, "preset", None) or None,
        truth_path=truth if truth.exists() else None,
    )


def _read_ids(path: str | None) -> list[str] | None:
    if not path:
        return None
    ids = [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]
    if not ids:
        raise DataError(f"{path}: no entity ids")
    return ids


def _entities(args, dataset: Dataset, attr: str = "entities") -> list[str]:
    ids = _read_ids(getattr(args, attr, None))
    if ids is None:
        return dataset.ids
    for eid in ids:
        dataset[eid]
    return ids


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(analysis._jsonable(obj), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    config = SyntheticConfig(n_entities=args.entities, n_days=args.days, seed=args.seed if args.seed is not None else 0)
    dataset = synthesize(config)
    out = write_dataset(dataset, _out(args))
    _write_json(out / "synthetic_config.json", config.to_dict())
    print(f"wrote {len(dataset)} entities to {out}")


def cmd_ingest(args) -> None:
    period = parse_period(args.period)
    dataset = ingest_csv(
        args.forcing_dir,
        args.attributes,
        args.preset or None,
        args.drivers.split(",") if args.drivers else None,
        period,
    )
    out = write_dataset(dataset, _out(args), write_truth=False)
    _write_json(out / "ingest_report.json", dataset.meta["ingest_report"])
    print(f"ingested {len(dataset)} entities, {len(dataset.dates)} dates")


def cmd_train(args) -> None:
    dataset = _load(args)
    config = _train_config(args)
    ids = _entities(args, dataset)
    period = parse_period(args.period)
    bounds = dataset.resolve_period(period)
    std, _ = fit_normalize(dataset, ids, bounds)
    out = _out(args)
    write_flat_config(out / "train_config.txt", config.to_dict())
    for seed in config.seeds:
        ckpt = train(std, ids, bounds, config, seed=seed)
        ckpt.save(out / f"seed{seed}.kgssl")
        write_training_log(out / f"train_log_seed{seed}.csv", ckpt.loss_trace)
        print(f"seed {seed}: final loss {ckpt.loss_trace[-1, 0]:.5f}")


def cmd_grid(args) -> None:
    dataset = _load(args)
    base = _train_config(args)
    ids = _entities(args, dataset)
    bounds = dataset.resolve_period(parse_period(args.period))
    std, _ = fit_normalize(dataset, ids, bounds)
    grid = HyperGrid()
    best, results = grid_search(std, grid, ids, bounds, base, args.validation_days, args.max_points, args.sample_seed)
    out = _out(args)
    with open(out / "grid_results.csv", "w", newline="") as fh:
        names = list(results[0].point)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*names, "rmse"])
        for r in results:
            w.writerow([*(r.point[n] for n in names), repr(r.rmse)])
    write_flat_config(out / "best_config.txt", best.to_dict())
    print(f"evaluated {len(results)} of {len(grid)} grid points")


def _checkpoints(paths: Sequence[str]) -> list[Checkpoint]:
    if not paths:
        raise ConfigError("pass at least one --checkpoint")
    return [Checkpoint.load(p) for p in paths]


def cmd_estimate(args) -> None:
    ckpts = _checkpoints(args.checkpoint)
    dataset = apply_normalization(_load(args), ckpts[0].stats)
    ids = _entities(args, dataset)
    estimates = denoise_or_impute(ckpts, dataset, ids, parse_period(args.period), args.stride)
    out = _out(args)
    write_estimates_csv(out / "estimates.csv", estimates)
    write_embeddings_csv(out / "embeddings.csv", estimates)
    print(f"estimated {len(estimates)} entities")


def _injector_io(args):
    dataset = _load(args)
    fit_ids = _entities(args, dataset, "fit_entities")
    std, _ = fit_normalize(dataset, fit_ids)
    return std, _entities(args, dataset)


def cmd_corrupt(args) -> None:
    std, ids = _injector_io(args)
    spec = CorruptionSpec("noise", args.fraction, args.multiple, args.seed if args.seed is not None else 0, args.granularity)
    out = write_dataset(invert_normalization(corrupt(std, spec, ids)), _out(args), write_truth=True)
    print(f"wrote corrupted dataset to {out}")


def cmd_mask(args) -> None:
    std, ids = _injector_io(args)
    masked = mask_missing(std, args.fraction, args.seed if args.seed is not None else 0, ids)
    out = write_dataset(invert_normalization(masked), _out(args), write_truth=True)
    print(f"wrote masked dataset to {out}")


def _conditioning(args, dataset: Dataset) -> ConditioningSource:
    tag = args.conditioning
    if tag == "none":
        return ConditioningSource.none(args.cond_dim or len(dataset.char_names))
    if tag in ("measured", "corrupted"):
        return ConditioningSource.from_characteristics(dataset, tag)
    if not args.conditioning_file:
        raise ConfigError(f"--conditioning {tag} needs --conditioning-file")
    if tag == "imputed":
        ids, _, mat = read_estimates_csv(args.conditioning_file)
        return ConditioningSource.from_vectors(dict(zip(ids, mat)), "imputed")
    return ConditioningSource.from_vectors(read_embeddings_csv(args.conditioning_file), "embedding")


def cmd_forward_train(args) -> None:
    dataset = _load(args)
    config = _forward_config(args)
    ids = _entities(args, dataset)
    bounds = dataset.resolve_period(parse_period(args.period))
    std, stats = fit_normalize(dataset, ids, bounds)
    source = _conditioning(args, std)
    params = train_forward(std, source, config, ids, bounds)
    out = _out(args)
    save_forward(out / "forward.kgfwd", params, config, source.tag, stats)
    print(f"trained forward model ({source.tag}, {source.dim} conditioning dims)")


def cmd_forward_eval(args) -> None:
    params, config, _, stats = load_forward(args.model)
    dataset = _load(args)
    std = apply_normalization(dataset, stats) if stats is not None else fit_normalize(dataset)[0]
    if args.cond_dim is None:
        args.cond_dim = params.cond_dim
    source = _conditioning(args, std)
    ids = _entities(args, std)
    evaluation = evaluate_forward(params, std, source, ids, parse_period(args.period), config.warmup)
    out = _out(args)
    write_predictions_csv(out / "predictions.csv", evaluation)
    write_metrics(out, evaluation, source.tag)
    print(json.dumps(evaluation.summary(), sort_keys=True))


def cmd_report(args) -> None:
    ids, names, est = read_estimates_csv(args.estimates)
    truth_names, table = read_attributes(args.truth, names)
    missing = [i for i in ids if i not in table]
    if missing:
        raise DataError(f"truth file lacks entities {missing[:5]}")
    truth = np.stack([table[i] for i in ids])
    if args.stats_from:
        # truth in physical units; compare in the estimates' standardized space
        stats = Checkpoint.load(args.stats_from).stats
        truth = stats.characteristics_to_standard(truth)
    report = analysis.ExperimentReport(metrics=analysis.metric_table(est, truth, names), char_names=tuple(names))
    if args.groups == "camels":
        report.groups = analysis.group_report(est, truth, names, camels_groups())
    if args.embeddings:
        emb = read_embeddings_csv(args.embeddings)
        h = np.stack([emb[i] for i in ids])
        report.distance_z, report.distance_h, order = analysis.distance_matrices(truth, h)
        report.ordering = [ids[k] for k in order]
        report.embedding_corr, report.embedding_ranking = analysis.embedding_char_correlation(h, truth)
    report.provenance = {"estimates": str(args.estimates), "truth": str(args.truth), "package_version": __version__}
    report.write(_out(args))
    print(json.dumps(analysis._jsonable(analysis.table_means(report.metrics)), sort_keys=True))


def cmd_run(args) -> None:
    overrides = read_flat_config(args.config) if args.config else {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seeds"] = str(args.seed)
    out = Path(args.out_dir) / args.preset
    report = run_experiment(args.preset, out, overrides)
    print(json.dumps(analysis._jsonable(report.summary().get("metric_means", report.nse)), sort_keys=True))
    print(f"artifacts in {out}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> argparse.ArgumentParser:
        # subcommand copies use SUPPRESS so they never clobber flags given before the subcommand
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--config", default=d(None), help="flat 'key = value' config file")
        g.add_argument("--seed", type=int, default=d(None), help="single seed overriding the configured seeds")
        g.add_argument("--out-dir", default=d("."), help="output directory (default: current)")
        g.add_argument("--threads", type=int, default=d(None), help="torch intra-op threads")
        g.add_argument("-v", "--verbose", action="store_true", default=d(False))
        return g

    common = global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="kgssl", description=__doc__.splitlines()[0], parents=[global_flags(False)])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, parents=[common])
        p.set_defaults(func=func)
        return p

    def data_args(p, entities=True):
        p.add_argument("--data", help=f"directory with forcing/ and attributes.csv (default ${DATA_ROOT_ENV})")
        p.add_argument("--preset", choices=["camels"], help="characteristic/driver column preset")
        if entities:
            p.add_argument("--entities", help="file with one entity id per line (default: all)")

    p = add("synth", cmd_synth, "generate a synthetic dataset in the ingestion formats")
    p.add_argument("--entities", type=int, default=200)
    p.add_argument("--days", type=int, default=1460)

    p = add("ingest", cmd_ingest, "validate and align CSV inputs")
    p.add_argument("--forcing-dir", required=True)
    p.add_argument("--attributes", required=True)
    p.add_argument("--preset", choices=["camels"])
    p.add_argument("--drivers", help="comma-separated driver columns (default: all)")
    p.add_argument("--period", help="start:stop dates")

    p = add("train", cmd_train, "train one KGSSL checkpoint per seed")
    data_args(p)
    p.add_argument("--period", help="start:stop (dates or indices)")

    p = add("grid", cmd_grid, "hyperparameter grid search")
    data_args(p)
    p.add_argument("--period")
    p.add_argument("--validation-days", type=int, default=365)
    p.add_argument("--max-points", type=int, help="evaluate a random subset of grid points")
    p.add_argument("--sample-seed", type=int, default=0)

    p = add("estimate", cmd_estimate, "reconstruct characteristics and embeddings")
    data_args(p)
    p.add_argument("--checkpoint", action="append", default=[], help="repeat for an ensemble")
    p.add_argument("--period")
    p.add_argument("--stride", type=int, help="window stride (default: window length)")

    for name, func, help_text in (("corrupt", cmd_corrupt, "add Gaussian noise to characteristics"), ("mask", cmd_mask, "mark characteristics missing")):
        p = add(name, func, help_text)
        data_args(p)
        p.add_argument("--fit-entities", help="entities used to fit the standardization (default: all)")
        p.add_argument("--fraction", type=float, required=True)
        if name == "corrupt":
            p.add_argument("--multiple", type=float, default=2.0, help="noise std in column std units")
            p.add_argument("--granularity", choices=["entity", "entry"], default="entity")

    for name, func in (("forward-train", cmd_forward_train), ("forward-eval", cmd_forward_eval)):
        p = add(name, func, "train the conditioned forward model" if name == "forward-train" else "evaluate a forward model (NSE)")
        data_args(p)
        p.add_argument("--period")
        p.add_argument("--conditioning", choices=["none", "measured", "corrupted", "imputed", "embedding"], default="measured")
        p.add_argument("--conditioning-file", help="estimates CSV (imputed) or embeddings CSV (embedding)")
        p.add_argument("--cond-dim", type=int, help="conditioning size for 'none'")
        if name == "forward-eval":
            p.add_argument("--model", required=True)

    p = add("report", cmd_report, "metrics, distance matrices and correlations from estimate files")
    p.add_argument("--estimates", required=True)
    p.add_argument("--truth", required=True, help="attributes CSV with reference values")
    p.add_argument("--embeddings")
    p.add_argument("--groups", choices=["camels"])
    p.add_argument("--stats-from", help="checkpoint whose stats standardize a physical-unit truth file")

    p = add("run", cmd_run, "run a named experiment preset")
    p.add_argument("preset", help=f"one of: {', '.join(sorted(PRESETS))}")
    p.add_argument("--set", action="append", help="override key=value (repeatable)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        import torch

        torch.set_num_threads(args.threads)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ContractError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
