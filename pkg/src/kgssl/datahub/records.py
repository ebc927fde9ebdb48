from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from ..errors import DataError, SchemaError  # noqa: F401


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class EntityRecord:
    """One entity: drivers ``(T, D_x)``, response ``(T,)``, characteristics ``(D_z,)`` with availability.

    ``characteristics_true`` keeps the pre-corruption values once an injector
    has touched the record; it is ``None`` for untouched records.
    """

    id: str
    drivers: np.ndarray
    response: np.ndarray
    characteristics: np.ndarray
    mask: np.ndarray
    characteristics_true: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "drivers", _frozen(self.drivers))
        object.__setattr__(self, "response", _frozen(self.response))
        object.__setattr__(self, "characteristics", _frozen(self.characteristics))
        object.__setattr__(self, "mask", _frozen(self.mask, dtype=bool))
        if self.characteristics_true is not None:
            object.__setattr__(self, "characteristics_true", _frozen(self.characteristics_true))
        if self.drivers.ndim != 2 or self.response.shape != (self.drivers.shape[0],):
            raise DataError(f"{self.id}: drivers {self.drivers.shape} and response {self.response.shape} disagree on T")
        if self.mask.shape != self.characteristics.shape:
            raise DataError(f"{self.id}: mask length {self.mask.shape} != characteristic count {self.characteristics.shape}")
        if not (np.isfinite(self.drivers).all() and np.isfinite(self.response).all()):
            raise DataError(f"{self.id}: non-finite driver or response values")

    @property
    def length(self) -> int:
        return self.drivers.shape[0]

    @property
    def truth(self) -> np.ndarray:
        """Best known clean characteristic values (original values if the record was corrupted)."""
        return self.characteristics if self.characteristics_true is None else self.characteristics_true

    def sequence(self, period: tuple[int, int] | None = None) -> np.ndarray:
        """Rows ``[x_t; y_t]`` over ``period`` as a ``(T, D_x + 1)`` matrix."""
        lo, hi = period if period is not None else (0, self.length)
        return np.concatenate([self.drivers[lo:hi], self.response[lo:hi, None]], axis=1)


@dataclass(frozen=True)
class NormalizationStats:
    driver_mean: np.ndarray
    driver_std: np.ndarray
    response_mean: float
    response_std: float
    char_mean: np.ndarray
    char_std: np.ndarray

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "driver_mean": np.asarray(self.driver_mean),
            "driver_std": np.asarray(self.driver_std),
            "response_mean": np.asarray([self.response_mean]),
            "response_std": np.asarray([self.response_std]),
            "char_mean": np.asarray(self.char_mean),
            "char_std": np.asarray(self.char_std),
        }

    @classmethod
    def from_arrays(cls, arrays) -> "NormalizationStats":
        return cls(
            driver_mean=np.asarray(arrays["driver_mean"]),
            driver_std=np.asarray(arrays["driver_std"]),
            response_mean=float(arrays["response_mean"][0]),
            response_std=float(arrays["response_std"][0]),
            char_mean=np.asarray(arrays["char_mean"]),
            char_std=np.asarray(arrays["char_std"]),
        )

    def characteristics_to_physical(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) * self.char_std + self.char_mean

    def characteristics_to_standard(self, z: np.ndarray) -> np.ndarray:
        return (np.asarray(z) - self.char_mean) / self.char_std

    def response_to_physical(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y) * self.response_std + self.response_mean


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of entity records sharing a time axis and column schema."""

    records: tuple[EntityRecord, ...]
    driver_names: tuple[str, ...]
    char_names: tuple[str, ...]
    dates: np.ndarray | None = None
    stats: NormalizationStats | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        recs = tuple(sorted(self.records, key=lambda r: r.id))
        object.__setattr__(self, "records", recs)
        object.__setattr__(self, "driver_names", tuple(self.driver_names))
        object.__setattr__(self, "char_names", tuple(self.char_names))
        ids = [r.id for r in recs]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate entity ids")
        for r in recs:
            if r.drivers.shape[1] != len(self.driver_names):
                raise DataError(f"{r.id}: {r.drivers.shape[1]} driver columns, schema has {len(self.driver_names)}")
            if r.characteristics.shape[0] != len(self.char_names):
                raise DataError(f"{r.id}: {r.characteristics.shape[0]} characteristics, schema has {len(self.char_names)}")
        object.__setattr__(self, "_index", {r.id: r for r in recs})

    @property
    def standardized(self) -> bool:
        return self.stats is not None

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, entity_id: str) -> EntityRecord:
        try:
            return self._index[entity_id]
        except KeyError:
            raise DataError(f"unknown entity {entity_id!r}") from None

    def subset(self, ids: Iterable[str]) -> "Dataset":
        return replace(self, records=tuple(self[i] for i in ids))

    def with_records(self, records: Sequence[EntityRecord]) -> "Dataset":
        return replace(self, records=tuple(records))

    def characteristic_matrix(self, ids: Sequence[str] | None = None, truth: bool = False) -> np.ndarray:
        ids = self.ids if ids is None else ids
        return np.stack([self[i].truth if truth else self[i].characteristics for i in ids])

    def resolve_period(self, period) -> tuple[int, int]:
        """Turn ``None``, ``(start, stop)`` indices, or ``(date, date)`` strings into index bounds.

        Date bounds are inclusive of the start and exclusive of the stop.
        """
        n = self.records[0].length if self.records else 0
        if period is None:
            return 0, n
        lo, hi = period
        if isinstance(lo, str) or isinstance(hi, str):
            if self.dates is None:
                raise DataError("dataset has no dates; use index periods")
            lo = 0 if lo in (None, "") else int(np.searchsorted(self.dates, np.datetime64(lo)))
            hi = n if hi in (None, "") else int(np.searchsorted(self.dates, np.datetime64(hi)))
        lo = 0 if lo is None else int(lo)
        hi = n if hi is None else int(hi)
        if not 0 <= lo < hi <= n:
            raise DataError(f"period {period} outside [0, {n})")
        return lo, hi


@dataclass(frozen=True)
class WindowPair:
    entity_id: str
    anchor: np.ndarray  # (W, D_x + 1)
    positive: np.ndarray
    anchor_start: int
    positive_start: int


def parse_period(text: str | None):
    """``"2001-01-01:2009-01-01"`` or ``"0:1095"`` -> tuple; empty -> None."""
    if not text:
        return None
    lo, _, hi = text.partition(":")
    conv = lambda s: int(s) if s.strip().lstrip("-").isdigit() else (s.strip() or None)  # noqa: E731
    return conv(lo), conv(hi)
