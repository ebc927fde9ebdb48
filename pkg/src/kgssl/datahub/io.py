"""CSV ingestion and export.

Forcing files: one ``<entity_id>.csv`` per entity, header
``date,<driver_1>,...,<driver_Dx>,response``, ISO dates, daily rows.
Attributes file: header ``entity_id,<char_1>,...,<char_Dz>``; an empty cell
means the value is unavailable.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .records import DataError, Dataset, EntityRecord, SchemaError

MISSING_TOKENS = {"", "nan", "na", "null"}

# 27 static attributes in climate (C), soil-geology (S) and geomorphology (G) groups.
CAMELS_CHARACTERISTICS = {
    "C1": "p_mean",
    "C2": "pet_mean",
    "C3": "p_seasonality",
    "C4": "frac_snow",
    "C5": "aridity",
    "C6": "high_prec_freq",
    "C7": "high_prec_dur",
    "C8": "low_prec_freq",
    "C9": "low_prec_dur",
    "S1": "carbonate_rocks_frac",
    "S2": "geol_permeability",
    "S3": "soil_depth_pelletier",
    "S4": "soil_depth_statsgo",
    "S5": "soil_porosity",
    "S6": "soil_conductivity",
    "S7": "max_water_content",
    "S8": "sand_frac",
    "S9": "silt_frac",
    "S10": "clay_frac",
    "G1": "elev_mean",
    "G2": "slope_mean",
    "G3": "area_gages2",
    "G4": "frac_forest",
    "G5": "lai_max",
    "G6": "lai_diff",
    "G7": "gvf_max",
    "G8": "gvf_diff",
}
CAMELS_FORCINGS = ("prcp", "srad", "tmax", "tmin", "vp")
PRESETS = {"camels": (CAMELS_FORCINGS, tuple(CAMELS_CHARACTERISTICS.values()))}


def camels_groups() -> dict[str, str]:
    """Characteristic name -> group letter (C, S or G)."""
    return {name: index[0] for index, name in CAMELS_CHARACTERISTICS.items()}


@dataclass
class IngestReport:
    rejected_rows: dict[str, list[int]] = field(default_factory=dict)
    dropped_dates: int = 0
    entities_without_attributes: list[str] = field(default_factory=list)
    attributes_without_forcing: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "rejected_rows": self.rejected_rows,
            "dropped_dates": self.dropped_dates,
            "entities_without_attributes": self.entities_without_attributes,
            "attributes_without_forcing": self.attributes_without_forcing,
        }


def _parse_float(token: str, where: str) -> float:
    if token.strip().lower() in MISSING_TOKENS:
        return np.nan
    try:
        return float(token)
    except ValueError:
        raise DataError(f"{where}: cannot parse {token!r} as a number") from None


def _read_forcing(path: Path, driver_names: Sequence[str] | None):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if not header or header[0] != "date" or header[-1] != "response":
            raise SchemaError(f"{path}: header must be 'date,<drivers...>,response', got {header}")
        available = header[1:-1]
        names = list(available) if driver_names is None else list(driver_names)
        for name in names:
            if name not in available:
                raise SchemaError(f"{path}: missing driver column {name!r}")
        cols = [header.index(n) for n in names] + [len(header) - 1]
        dates, values, rejected = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                date = np.datetime64(row[0].strip(), "D")
            except ValueError:
                raise DataError(f"{path}:{lineno}: unparseable date {row[0]!r}") from None
            vals = [_parse_float(row[c], f"{path}:{lineno}") for c in cols]
            if not np.isfinite(vals).all():
                rejected.append(lineno)
                continue
            dates.append(date)
            values.append(vals)
    return names, np.array(dates, dtype="datetime64[D]"), np.array(values, dtype=float).reshape(-1, len(cols)), rejected


def read_attributes(path: str | Path, names: Sequence[str] | None = None) -> tuple[list[str], dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"attributes file {path} not found")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if not header or header[0] != "entity_id":
            raise SchemaError(f"{path}: first column must be 'entity_id'")
        names = list(header[1:]) if names is None else list(names)
        for name in names:
            if name not in header[1:]:
                raise SchemaError(f"{path}: missing characteristic column {name!r}")
        cols = [header.index(n) for n in names]
        table = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            table[row[0].strip()] = np.array([_parse_float(row[c], f"{path}:{lineno}") for c in cols])
    return names, table


def ingest_csv(
    forcing_dir: str | Path,
    attributes_path: str | Path,
    characteristic_names: Sequence[str] | str | None = None,
    driver_names: Sequence[str] | None = None,
    period: tuple[str, str] | None = None,
    truth_path: str | Path | None = None,
) -> Dataset:
    """Read one forcing CSV per entity plus the attributes table into a :class:`Dataset`.

    ``characteristic_names`` may be a preset name (``"camels"``). Rows with a
    missing forcing or response value are dropped and listed in the report;
    entities are then aligned on the intersection of their dates.
    """
    if isinstance(characteristic_names, str):
        if characteristic_names not in PRESETS:
            raise SchemaError(f"unknown preset {characteristic_names!r}; available: {sorted(PRESETS)}")
        preset_drivers, characteristic_names = PRESETS[characteristic_names]
        driver_names = driver_names or preset_drivers
    forcing_dir = Path(forcing_dir)
    files = sorted(forcing_dir.glob("*.csv")) if forcing_dir.is_dir() else []
    if not files:
        raise DataError(f"no forcing CSV files found in {forcing_dir}")
    char_names, attrs = read_attributes(attributes_path, characteristic_names)
    truth = read_attributes(truth_path, char_names)[1] if truth_path else {}

    report = IngestReport()
    parsed = {}
    schema = None
    for path in files:
        names, dates, values, rejected = _read_forcing(path, driver_names)
        if schema is None:
            schema = names
        elif names != schema:
            raise SchemaError(f"{path}: driver columns {names} differ from {schema}")
        if rejected:
            report.rejected_rows[path.stem] = rejected
        parsed[path.stem] = (dates, values)

    common = None
    for dates, _ in parsed.values():
        common = dates if common is None else np.intersect1d(common, dates)
    if period is not None:
        lo, hi = period
        if lo:
            common = common[common >= np.datetime64(lo, "D")]
        if hi:
            common = common[common < np.datetime64(hi, "D")]
    if common is None or common.size == 0:
        raise DataError("forcing files share no dates in the requested period")
    report.dropped_dates = int(sum(d.size for d, _ in parsed.values()) - common.size * len(parsed))

    d_z = len(char_names)
    records = []
    for eid, (dates, values) in parsed.items():
        idx = np.searchsorted(dates, common)
        vals = values[idx]
        if eid in attrs:
            z = attrs[eid]
        else:
            z = np.full(d_z, np.nan)
            report.entities_without_attributes.append(eid)
        records.append(
            EntityRecord(
                id=eid,
                drivers=vals[:, :-1],
                response=vals[:, -1],
                characteristics=z,
                mask=np.isfinite(z),
                characteristics_true=truth.get(eid),
            )
        )
    report.attributes_without_forcing = sorted(set(attrs) - set(parsed))
    return Dataset(
        records=tuple(records),
        driver_names=tuple(schema),
        char_names=tuple(char_names),
        dates=common,
        meta={"source": str(forcing_dir), "ingest_report": report.to_dict()},
    )


def _fmt(x: float) -> str:
    return "" if not np.isfinite(x) else repr(float(x))


def write_attributes(path: str | Path, ids: Sequence[str], names: Sequence[str], rows: Sequence[np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity_id", *names])
        for eid, z in zip(ids, rows):
            w.writerow([eid, *(_fmt(v) for v in z)])


def write_dataset(dataset: Dataset, out_dir: str | Path, write_truth: bool | None = None) -> Path:
    """Export in the ingestion formats: ``forcing/<id>.csv``, ``attributes.csv`` and,
    when clean values are known, ``attributes_truth.csv``. Values must be physical units."""
    if dataset.standardized:
        raise DataError("export physical-unit data (invert the normalization first)")
    if dataset.dates is None:
        raise DataError("dataset has no dates to export")
    out = Path(out_dir)
    (out / "forcing").mkdir(parents=True, exist_ok=True)
    dates = [str(d) for d in dataset.dates]
    for rec in dataset:
        with open(out / "forcing" / f"{rec.id}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", *dataset.driver_names, "response"])
            for t, d in enumerate(dates):
                w.writerow([d, *(repr(float(v)) for v in rec.drivers[t]), repr(float(rec.response[t]))])
    rows = [np.where(r.mask, r.characteristics, np.nan) for r in dataset]
    write_attributes(out / "attributes.csv", dataset.ids, dataset.char_names, rows)
    if write_truth is None:
        write_truth = dataset.meta.get("source") == "synthetic" or any(r.characteristics_true is not None for r in dataset)
    if write_truth:
        write_attributes(out / "attributes_truth.csv", dataset.ids, dataset.char_names, [r.truth for r in dataset])
    return out
