"""Reading Low Carbon London style meter extracts and generating synthetic panels."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Literal, Union

import numpy as np
import pandas as pd

from .errors import AllSeriesDropped, EmptyInput, MissingHeader, NoParseableRows, OffGrid, OutOfRange
from .panel import HALF_HOUR, TICKS_PER_DAY, ProfilePanel, TimeIndex, build_panel, to_datetime64

log = logging.getLogger(__name__)

LCL_ID = "LCLid"
LCL_TIME = "DateTime"
LCL_VALUE = "KWH/hh (per half hour)"

#: Recorded in run reports so sampling can be replayed elsewhere.
RNG_NAME = f"numpy.random.PCG64/numpy-{np.__version__}"

GapMode = Literal["drop-series", "fill-zero", "linear-interpolate"]


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class GapPolicy:
    mode: GapMode = "linear-interpolate"
    max_gap: int = 4

    def __post_init__(self):
        if self.mode not in ("drop-series", "fill-zero", "linear-interpolate"):
            raise ValueError(f"unknown gap mode {self.mode!r}")
        if self.max_gap < 0:
            raise ValueError("max_gap must be >= 0")


@dataclass(frozen=True)
class ParseResult:
    readings: pd.DataFrame  # columns series_id, timestamp (UTC), kwh
    skipped: int


def parse_lcl_csv(
    stream: Union[IO[str], str, Path],
    id_col: str = LCL_ID,
    time_col: str = LCL_TIME,
    value_col: str = LCL_VALUE,
    chunksize: int = 1_000_000,
) -> ParseResult:
    """Parse a long-format meter CSV into readings.

    Rows whose energy or timestamp field does not parse (LCL uses ``Null``)
    are skipped and counted.
    """
    try:
        chunks = pd.read_csv(
            stream, dtype=str, keep_default_na=False, chunksize=chunksize, skipinitialspace=True
        )
        parts, skipped = [], 0
        header_checked = False
        for chunk in chunks:
            if not header_checked:
                missing = [c for c in (id_col, time_col, value_col) if c not in chunk.columns]
                if missing:
                    raise MissingHeader(f"header lacks column(s) {missing}")
                header_checked = True
            raw = chunk[value_col].str.strip()
            # to_numeric only detects parseable fields; astype gives exact values
            kwh = pd.to_numeric(raw, errors="coerce")
            kwh[kwh.notna()] = raw[kwh.notna()].astype(np.float64)
            stamps = pd.to_datetime(chunk[time_col].str.strip(), utc=True, errors="coerce", format="mixed")
            ok = kwh.notna() & stamps.notna() & (chunk[id_col].str.strip() != "")
            skipped += int((~ok).sum())
            parts.append(
                pd.DataFrame(
                    {
                        "series_id": chunk.loc[ok, id_col].str.strip(),
                        "timestamp": stamps[ok],
                        "kwh": kwh[ok].astype(np.float64),
                    }
                )
            )
    except pd.errors.EmptyDataError:
        raise MissingHeader("empty stream: header row required") from None
    if not header_checked:
        # header only, no data rows: pandas yields no chunks
        raise NoParseableRows("no data rows")
    readings = pd.concat(parts, ignore_index=True)
    if readings.empty:
        raise NoParseableRows(f"no parseable rows ({skipped} skipped)")
    if skipped:
        log.warning("skipped %d unparseable rows", skipped)
    return ParseResult(readings, skipped)


def _interior_runs(missing: np.ndarray):
    """Yield (start, stop) of NaN runs in a boolean mask."""
    padded = np.concatenate(([False], missing, [False]))
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return zip(edges[::2], edges[1::2])


def _fill_series(row: np.ndarray, max_gap: int) -> np.ndarray | None:
    missing = np.isnan(row)
    if not missing.any():
        return row
    out = row.copy()
    n = len(row)
    for lo, hi in _interior_runs(missing):
        # edge gaps have no anchor on one side and are never interpolated
        if lo == 0 or hi == n or hi - lo > max_gap:
            return None
        left, right = row[lo - 1], row[hi]
        frac = np.arange(1, hi - lo + 1) / (hi - lo + 1)
        out[lo:hi] = left + frac * (right - left)
    return out


def regularize(readings, policy: GapPolicy = GapPolicy()) -> ProfilePanel:
    """Place readings on their union half-hour grid and resolve gaps.

    Edge gaps (a series starting late or ending early) cannot be interpolated,
    so under ``linear-interpolate`` they drop the series like an over-long gap.
    """
    if isinstance(readings, ParseResult):
        readings = readings.readings
    panel = build_panel(readings)
    values = panel.values
    keep, rows = [], []
    for sid, row in zip(panel.ids, values):
        if policy.mode == "fill-zero":
            filled = np.where(np.isnan(row), 0.0, row)
        elif policy.mode == "drop-series":
            filled = None if np.isnan(row).any() else row
        else:
            filled = _fill_series(row, policy.max_gap)
        if filled is None:
            log.warning("dropping series %s (gap policy %s)", sid, policy.mode)
            continue
        keep.append(sid)
        rows.append(filled)
    if not keep:
        raise AllSeriesDropped(f"every series was dropped under gap policy {policy.mode!r}")
    return ProfilePanel(tuple(keep), panel.index, np.vstack(rows))


def sample_households(panel: ProfilePanel, n: int, seed: int) -> ProfilePanel:
    """Draw ``n`` series uniformly without replacement; result sorted by id."""
    if not 1 <= n <= panel.n_series:
        raise OutOfRange(f"cannot sample {n} of {panel.n_series} series")
    base = panel.sorted()
    picked = make_rng(seed).choice(base.n_series, size=n, replace=False)
    return base.select(sorted(base.ids[i] for i in picked))


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic household generator.

    Each household is ``base_load`` plus a daily (48-tick) and weekly
    (336-tick) sinusoid with its own amplitude and phase jitter, Gaussian
    noise, and occasional exponential spikes, clipped at zero.
    """

    n_households: int = 100
    days: int = 28
    daily_amplitude: float = 0.2
    weekly_amplitude: float = 0.04
    noise_sd: float = 0.04
    spike_prob: float = 0.001
    spike_scale: float = 0.4
    base_load: float = 0.3
    amplitude_jitter: float = 0.2
    phase_jitter: float = 0.1
    seed: int = 0
    start: str = "2013-01-01T00:00:00"

    def __post_init__(self):
        if self.n_households < 1:
            raise OutOfRange("n_households must be >= 1")
        if self.days < 1:
            raise OutOfRange("days must be >= 1")
        for name in ("daily_amplitude", "weekly_amplitude", "noise_sd", "spike_scale", "base_load",
                     "amplitude_jitter", "phase_jitter"):
            if getattr(self, name) < 0:
                raise OutOfRange(f"{name} must be non-negative")
        if not 0.0 <= self.spike_prob <= 1.0:
            raise OutOfRange("spike_prob must lie in [0, 1]")
        if self.amplitude_jitter > 1:
            raise OutOfRange("amplitude_jitter must lie in [0, 1]")


def synth_panel(config: SynthConfig) -> ProfilePanel:
    rng = make_rng(config.seed)
    n, length = config.n_households, config.days * TICKS_PER_DAY
    t = np.arange(length, dtype=np.float64)

    jitter = config.amplitude_jitter
    amp_day = config.daily_amplitude * rng.uniform(1 - jitter, 1 + jitter, n)
    amp_week = config.weekly_amplitude * rng.uniform(1 - jitter, 1 + jitter, n)
    phase_day = rng.normal(0.0, config.phase_jitter, n)
    phase_week = rng.normal(0.0, config.phase_jitter, n)

    values = np.full((n, length), config.base_load)
    values += amp_day[:, None] * np.sin(2 * np.pi * t / TICKS_PER_DAY + phase_day[:, None])
    values += amp_week[:, None] * np.sin(2 * np.pi * t / (7 * TICKS_PER_DAY) + phase_week[:, None])
    if config.noise_sd > 0:
        values += rng.normal(0.0, config.noise_sd, (n, length))
    if config.spike_prob > 0:
        hits = rng.random((n, length)) < config.spike_prob
        values += hits * rng.exponential(config.spike_scale, (n, length))
    np.clip(values, 0.0, None, out=values)

    width = len(str(n - 1))
    ids = tuple(f"H{i:0{width}d}" for i in range(n))
    return ProfilePanel(ids, TimeIndex(config.start, length, HALF_HOUR), values)


def _iso(ticks: np.ndarray) -> list[str]:
    return [f"{s}Z" for s in np.datetime_as_string(ticks.astype("datetime64[s]"), unit="s")]


def write_wide_csv(panel: ProfilePanel, dest, column_names=None) -> None:
    """Write ``timestamp`` plus one column per series, ISO-8601 UTC stamps."""
    names = list(column_names) if column_names is not None else list(panel.ids)
    frame = pd.DataFrame(panel.values.T, columns=names)
    frame.insert(0, "timestamp", _iso(panel.index.ticks()))
    frame.to_csv(dest, index=False, lineterminator="\n")


def read_wide_csv(source) -> ProfilePanel:
    try:
        frame = pd.read_csv(source, dtype={"timestamp": str}, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise MissingHeader("empty panel file") from None
    if "timestamp" not in frame.columns:
        raise MissingHeader("wide panel needs a 'timestamp' column")
    if frame.empty or frame.shape[1] < 2:
        raise EmptyInput("panel file has no readings")
    stamps = np.array([to_datetime64(s) for s in frame["timestamp"]])
    if len(stamps) > 1:
        steps = np.diff(stamps)
        if (steps != steps[0]).any() or steps[0] <= np.timedelta64(0, "s"):
            raise OffGrid("panel timestamps are not a regular increasing grid")
        step = steps[0]
    else:
        step = HALF_HOUR
    ids = [str(c) for c in frame.columns[1:]]
    values = frame.iloc[:, 1:].to_numpy(dtype=np.float64).T
    return ProfilePanel(tuple(ids), TimeIndex(stamps[0], len(stamps), step), values)
