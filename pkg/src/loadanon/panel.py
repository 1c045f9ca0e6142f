"""In-memory model for aligned panels of half-hourly load profiles."""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Sequence, Union

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from .errors import DuplicateReading, EmptyInput, EmptyWindow, OffGrid, OutOfRange, ShapeMismatch

HALF_HOUR = np.timedelta64(30 * 60, "s")
TICKS_PER_DAY = 48

TimestampLike = Union[str, datetime, np.datetime64, pd.Timestamp]
READING_COLUMNS = ("series_id", "timestamp", "kwh")


def to_datetime64(ts: TimestampLike) -> np.datetime64:
    """Normalise a timestamp to a naive UTC ``datetime64[s]``."""
    stamp = pd.Timestamp(ts)
    if stamp.tzinfo is not None:
        stamp = stamp.tz_convert("UTC").tz_localize(None)
    return np.datetime64(stamp.to_datetime64(), "s")


@dataclass(frozen=True)
class TimeIndex:
    """Regular time axis: ``tick(i) = start + i * step``."""

    start: np.datetime64
    length: int
    step: np.timedelta64 = HALF_HOUR

    def __post_init__(self):
        object.__setattr__(self, "start", to_datetime64(self.start))
        object.__setattr__(self, "step", np.timedelta64(self.step, "s"))
        if self.step <= np.timedelta64(0, "s"):
            raise ValueError("step must be positive")
        if self.length < 1:
            raise ValueError("length must be >= 1")

    def tick(self, i: int) -> np.datetime64:
        if not 0 <= i < self.length:
            raise IndexError(i)
        return self.start + i * self.step

    def ticks(self) -> NDArray[np.datetime64]:
        return self.start + np.arange(self.length) * self.step

    @property
    def end(self) -> np.datetime64:
        """One step past the last tick (exclusive bound)."""
        return self.start + self.length * self.step

    def position(self, ts: TimestampLike, allow_end: bool = False) -> int:
        """Column position of an on-grid timestamp."""
        ts = to_datetime64(ts)
        offset = ts - self.start
        if offset % self.step != np.timedelta64(0, "s"):
            raise OffGrid(f"{ts} is not on the {self.step} grid anchored at {self.start}")
        pos = int(offset // self.step)
        upper = self.length if allow_end else self.length - 1
        if not 0 <= pos <= upper:
            raise OutOfRange(f"{ts} outside [{self.start}, {self.end})")
        return pos

    def day_of_week(self) -> NDArray[np.int64]:
        """Weekday per tick, Monday = 0."""
        days = self.ticks().astype("datetime64[D]").astype(np.int64)
        # 1970-01-01 was a Thursday
        return (days + 3) % 7

    def sub(self, offset: int, length: int) -> "TimeIndex":
        return TimeIndex(self.start + offset * self.step, length, self.step)


@dataclass(frozen=True)
class ProfilePanel:
    """N aligned series by T ticks, one series per contiguous row.

    ``values`` may hold NaN for missing readings until a gap policy has been
    applied (see :func:`loadanon.ingest.regularize`).
    """

    ids: tuple[str, ...]
    index: TimeIndex
    values: NDArray[np.float64] = field(repr=False)

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        values = np.array(self.values, dtype=np.float64, order="C", copy=True)
        if values.ndim != 2:
            raise ShapeMismatch(f"values must be 2-D, got shape {values.shape}")
        if values.shape != (len(ids), self.index.length):
            raise ShapeMismatch(
                f"values shape {values.shape} != ({len(ids)}, {self.index.length})"
            )
        if len(set(ids)) != len(ids):
            raise DuplicateReading("series ids must be unique")
        values.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "values", values)

    @property
    def n_series(self) -> int:
        return len(self.ids)

    @property
    def n_ticks(self) -> int:
        return self.index.length

    @property
    def has_missing(self) -> bool:
        return bool(np.isnan(self.values).any())

    def row(self, series_id: str) -> NDArray[np.float64]:
        return self.values[self.ids.index(series_id)]

    def select(self, ids: Sequence[str]) -> "ProfilePanel":
        pos = {s: i for i, s in enumerate(self.ids)}
        rows = [pos[s] for s in ids]
        return ProfilePanel(tuple(ids), self.index, self.values[rows])

    def sorted(self) -> "ProfilePanel":
        """Same panel with rows ordered by id."""
        order = sorted(range(self.n_series), key=lambda i: self.ids[i])
        return ProfilePanel(tuple(self.ids[i] for i in order), self.index, self.values[order])

    def to_readings(self) -> pd.DataFrame:
        """Long format: one (series_id, timestamp, kwh) row per cell."""
        ticks = self.index.ticks()
        return pd.DataFrame(
            {
                "series_id": np.repeat(np.array(self.ids, dtype=object), self.n_ticks),
                "timestamp": np.tile(ticks, self.n_series),
                "kwh": self.values.ravel(),
            }
        )


def _as_frame(records) -> pd.DataFrame:
    if isinstance(records, pd.DataFrame):
        frame = records.loc[:, list(READING_COLUMNS)]
    else:
        frame = pd.DataFrame(list(records), columns=list(READING_COLUMNS))
    return frame


def build_panel(
    records: Union[pd.DataFrame, Iterable[tuple]], step: np.timedelta64 = HALF_HOUR
) -> ProfilePanel:
    """Assemble (series-id, timestamp, kWh) triples into a dense panel.

    The grid starts at the earliest timestamp and spans to the latest one;
    cells without a reading are NaN. Rows are sorted by id.
    """
    frame = _as_frame(records)
    if frame.empty:
        raise EmptyInput("no readings")
    sid = frame["series_id"].astype(str).to_numpy()
    stamps = pd.to_datetime(frame["timestamp"], utc=True).dt.tz_localize(None)
    stamps = stamps.to_numpy().astype("datetime64[s]")
    kwh = frame["kwh"].to_numpy(dtype=np.float64)

    step = np.timedelta64(step, "s")
    start = stamps.min()
    offsets = stamps - start
    if (offsets % step != np.timedelta64(0, "s")).any():
        bad = stamps[offsets % step != np.timedelta64(0, "s")][0]
        raise OffGrid(f"timestamp {bad} is off the {step} grid anchored at {start}")
    cols = (offsets // step).astype(np.int64)
    ids, rows = np.unique(sid, return_inverse=True)

    flat = rows * (int(cols.max()) + 1) + cols
    uniq, counts = np.unique(flat, return_counts=True)
    if (counts > 1).any():
        dup = uniq[counts > 1][0]
        n_cols = int(cols.max()) + 1
        raise DuplicateReading(
            f"duplicate reading for series {ids[dup // n_cols]!r} at {start + (dup % n_cols) * step}"
        )

    length = int(cols.max()) + 1
    values = np.full((len(ids), length), np.nan)
    values[rows, cols] = kwh
    return ProfilePanel(tuple(ids.tolist()), TimeIndex(start, length, step), values)


def global_average_profile(panel: ProfilePanel) -> NDArray[np.float64]:
    """Column-wise mean over all series."""
    if panel.n_series == 0:
        raise EmptyInput("empty panel")
    return panel.values.mean(axis=0)


def slice_window(panel: ProfilePanel, t_from: TimestampLike, t_to: TimestampLike) -> ProfilePanel:
    """Restrict the panel to ticks in ``[t_from, t_to)``."""
    lo = to_datetime64(t_from)
    hi = to_datetime64(t_to)
    if lo == hi:
        raise EmptyWindow(f"empty window at {lo}")
    if lo > hi:
        raise EmptyWindow(f"inverted window [{lo}, {hi})")
    i = panel.index.position(lo)
    j = panel.index.position(hi, allow_end=True)
    return ProfilePanel(panel.ids, panel.index.sub(i, j - i), panel.values[:, i:j])
