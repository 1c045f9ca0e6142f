"""Rolling-origin day-ahead backtest over a ladder of anonymization levels.

For every repeat, level (``raw`` plus each k), model and window, one model is
fitted per series (households for ``raw``, group centroids otherwise), the
48 forecasts are aggregated to a single total-load series and scored against
the summed household actuals.
"""

from __future__ import annotations

import json
import logging
import multiprocessing
import os
import re
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Optional, Union

import jsonschema
import numpy as np
from numpy.typing import NDArray
from threadpoolctl import threadpool_limits

from .errors import ConfigError, LoadAnonError, OutOfRange, ShapeMismatch
from .forecast import KINDS, ModelSpec, fit_model, predict_recursive
from .ingest import RNG_NAME, sample_households
from .mdav import anonymize
from .panel import TICKS_PER_DAY, ProfilePanel, TimeIndex

log = logging.getLogger(__name__)

RAW = "raw"
METRICS = ("mae", "mape", "mse", "rmse", "smape")
Level = Union[str, int]


def default_k_ladder() -> list[int]:
    return [2, 3, 5, 10, 15, 20, 25, 30, 40, 50, 70, 100, 200, 500, 1000]


@dataclass(frozen=True)
class Window:
    train_end: date
    forecast_day: date
    label: int

    def __post_init__(self):
        if self.forecast_day != self.train_end + timedelta(days=1):
            raise LoadAnonError(f"window {self.label}: forecast day must follow train end")

    def bounds(self, index: TimeIndex) -> tuple[int, int]:
        """(first forecast tick, one past the last forecast tick) on ``index``."""
        start = np.datetime64(self.forecast_day.isoformat(), "s")
        stop = start + np.timedelta64(1, "D")
        try:
            lo = index.position(start)
            hi = index.position(stop, allow_end=True)
        except LoadAnonError:
            raise OutOfRange(
                f"panel [{index.start}, {index.end}) does not span window {self.label} "
                f"(forecast {self.forecast_day})"
            ) from None
        if lo == 0:
            raise OutOfRange(f"window {self.label} has no training data")
        return lo, hi


def default_windows(year: int) -> list[Window]:
    ends = [(8, 28), (9, 28), (10, 29), (11, 29), (12, 30)]
    return [
        Window(date(year, m, d), date(year, m, d) + timedelta(days=1), i + 1)
        for i, (m, d) in enumerate(ends)
    ]


def aggregate_raw(forecasts) -> NDArray[np.float64]:
    f = np.atleast_2d(np.asarray(forecasts, dtype=np.float64))
    if f.shape[0] < 1:
        raise ShapeMismatch("need at least one forecast row")
    return f.sum(axis=0)


def aggregate_anonymized(group_forecasts, group_sizes) -> NDArray[np.float64]:
    """Size-weighted sum of group forecasts.

    Weighting by each group's actual size (not the nominal k) keeps the
    total exact when MDAV leaves groups of up to 2k-1 members.
    """
    f = np.atleast_2d(np.asarray(group_forecasts, dtype=np.float64))
    sizes = np.asarray(group_sizes, dtype=np.float64)
    if sizes.shape != (f.shape[0],):
        raise ShapeMismatch(f"{f.shape[0]} group forecasts but {sizes.size} sizes")
    return sizes @ f


@dataclass(frozen=True)
class Scores:
    mae: float
    mape: float
    mse: float
    rmse: float
    smape: float
    mape_excluded: int = 0
    smape_excluded: int = 0

    def as_dict(self) -> dict:
        return {m: getattr(self, m) for m in METRICS}


def score(actual, predicted) -> Scores:
    """MAE, MAPE, MSE, RMSE and SMAPE; percentage errors are fractions.

    MAPE skips zero actuals and SMAPE skips points where both values are
    zero; the skip counts are kept.
    """
    y = np.asarray(actual, dtype=np.float64)
    yhat = np.asarray(predicted, dtype=np.float64)
    if y.shape != yhat.shape or y.ndim != 1:
        raise ShapeMismatch(f"actual {y.shape} vs predicted {yhat.shape}")
    if y.size == 0:
        raise ShapeMismatch("empty series")
    err = np.abs(y - yhat)
    nz = y != 0
    denom = np.abs(y) + np.abs(yhat)
    sm = denom > 0
    if not nz.any() or not sm.any():
        raise LoadAnonError("no points left after excluding zero actuals")
    mse = float(np.mean(err**2))
    return Scores(
        mae=float(err.mean()),
        mape=float(np.mean(err[nz] / np.abs(y[nz]))),
        mse=mse,
        rmse=float(np.sqrt(mse)),
        smape=float(np.mean(err[sm] / (denom[sm] / 2))),
        mape_excluded=int((~nz).sum()),
        smape_excluded=int((~sm).sum()),
    )


# ---------------------------------------------------------------- configuration

_SYNTH_KEYS = (
    "n_households", "days", "daily_amplitude", "weekly_amplitude", "noise_sd", "spike_prob",
    "spike_scale", "base_load", "amplitude_jitter", "phase_jitter", "seed", "start",
)
_WINDOW = {
    "type": "object",
    "required": ["train_end", "forecast_day", "label"],
    "additionalProperties": False,
    "properties": {
        "train_end": {"type": "string", "format": "date"},
        "forecast_day": {"type": "string", "format": "date"},
        "label": {"type": "integer", "minimum": 1},
    },
}
CONFIG_SCHEMA = {
    "type": "object",
    "required": ["input", "k_ladder", "models", "seed"],
    "additionalProperties": False,
    "properties": {
        "input": {
            "type": "object",
            "minProperties": 1,
            "maxProperties": 2,
            "additionalProperties": False,
            "properties": {
                "panel": {"type": "string"},
                "format": {"enum": ["wide", "lcl"]},
                "synthetic": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {key: {"type": ["number", "string"]} for key in _SYNTH_KEYS},
                },
            },
        },
        "k_ladder": {
            "oneOf": [
                {"const": "default"},
                {
                    "type": "array",
                    "minItems": 1,
                    "items": {"oneOf": [{"const": RAW}, {"type": "integer", "minimum": 2}]},
                },
            ]
        },
        "models": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["kind"],
                "additionalProperties": False,
                "properties": {
                    "kind": {"enum": list(KINDS)},
                    "period": {"type": "integer", "minimum": 2},
                    "horizon": {"type": "integer", "minimum": 1},
                    "hyperparameters": {"type": "object"},
                },
            },
        },
        "windows": {
            "oneOf": [
                {"const": "default"},
                {
                    "type": "object",
                    "required": ["year"],
                    "additionalProperties": False,
                    "properties": {"year": {"type": "integer"}},
                },
                {"type": "array", "minItems": 1, "items": _WINDOW},
            ]
        },
        "repeats": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "sample_size": {"type": ["integer", "null"], "minimum": 1},
        "history_days": {"type": ["integer", "null"], "minimum": 1},
    },
}


@dataclass
class ExperimentConfig:
    """Everything a backtest run needs besides the panel itself.

    ``k_ladder`` lists the anonymization levels; the ``raw`` level is always
    run and placed first. ``windows=None`` means the default five windows of
    the panel's first year. ``history_days`` caps the training history fed
    to each model (``None`` keeps everything up to the window's train end).
    """

    k_ladder: list
    models: list[ModelSpec]
    seed: int
    windows: Optional[list[Window]] = None
    repeats: int = 2
    sample_size: Optional[int] = None
    history_days: Optional[int] = None
    input: dict = field(default_factory=dict)

    @property
    def levels(self) -> list[Level]:
        ks = [k for k in self.k_ladder if k != RAW]
        return [RAW, *ks]

    def __post_init__(self):
        if self.repeats < 1:
            raise LoadAnonError("repeats must be >= 1")
        for k in self.k_ladder:
            if k != RAW and (not isinstance(k, (int, np.integer)) or k < 2):
                raise LoadAnonError(f"ladder levels must be integers >= 2 or {RAW!r}, got {k!r}")


def _error_path(err: jsonschema.ValidationError) -> str:
    parts = ""
    for p in err.absolute_path:
        parts += f"[{p}]" if isinstance(p, int) else f".{p}"
    if err.validator == "required":
        missing = re.match(r"'(.+?)' is a required property", err.message)
        if missing:
            parts += f".{missing.group(1)}"
    return parts or "."


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a JSON config document and build an :class:`ExperimentConfig`."""
    validator = jsonschema.Draft202012Validator(
        CONFIG_SCHEMA, format_checker=jsonschema.Draft202012Validator.FORMAT_CHECKER
    )
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise ConfigError(err.message, _error_path(err))
    inp = raw["input"]
    if ("panel" in inp) == ("synthetic" in inp):
        raise ConfigError("exactly one of 'panel' or 'synthetic' is required", ".input")
    ladder = default_k_ladder() if raw["k_ladder"] == "default" else list(raw["k_ladder"])
    models = []
    for i, m in enumerate(raw["models"]):
        try:
            models.append(ModelSpec(m["kind"], m.get("period", 48), m.get("horizon", 48),
                                    m.get("hyperparameters", {})))
        except LoadAnonError as exc:
            raise ConfigError(str(exc), f".models[{i}]") from None
    windows = raw.get("windows", "default")
    if windows == "default":
        windows = None
    elif isinstance(windows, dict):
        windows = default_windows(windows["year"])
    else:
        try:
            windows = [Window(date.fromisoformat(w["train_end"]), date.fromisoformat(w["forecast_day"]),
                              w["label"]) for w in windows]
        except (ValueError, LoadAnonError) as exc:
            raise ConfigError(str(exc), ".windows") from None
    return ExperimentConfig(
        k_ladder=ladder,
        models=models,
        seed=int(raw["seed"]),
        windows=windows,
        repeats=int(raw.get("repeats", 2)),
        sample_size=raw.get("sample_size"),
        history_days=raw.get("history_days"),
        input=dict(inp),
    )


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}", ".") from None
    return config_from_dict(raw)


# ---------------------------------------------------------------- experiment


@dataclass
class ExperimentReport:
    records: list[dict]
    failures: list[dict]
    summary: list[dict]
    meta: dict

    def to_json_obj(self) -> dict:
        return {"meta": self.meta, "summary": self.summary, "records": self.records,
                "failures": self.failures}

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), indent=2) + "\n"

    def to_csv(self) -> str:
        lines = ["k,model,window,repeat,metric,value"]
        for rec in self.records:
            for m in METRICS:
                lines.append(f"{rec['k']},{rec['model']},{rec['window']},{rec['repeat']},{m},{rec[m]!r}")
        return "\n".join(lines) + "\n"

    def level_mean(self, level: Level, model: str, metric: str) -> float:
        for row in self.summary:
            if row["k"] == level and row["model"] == model:
                return row[f"{metric}_mean"]
        raise KeyError((level, model))


def model_seed(root: int, repeat: int, level_pos: int, model_pos: int, window: int, series: int) -> int:
    """Seed for one model fit, derived from the root seed and the cell coordinates."""
    seq = np.random.SeedSequence([root, repeat, level_pos, model_pos, window, series])
    return int(seq.generate_state(1, np.uint64)[0])


def sample_seed(root: int, repeat: int) -> int:
    """Seed of the household sample drawn for ``repeat``."""
    seq = np.random.SeedSequence(root).spawn(repeat + 1)[repeat]
    return int(seq.generate_state(1, np.uint64)[0])


# worker-side state; set before forking so children share it copy-on-write
_SHARED: dict = {}


def _forecast_cell(task) -> tuple:
    key, series_key, spec_pos, lo, hi, hist_lo, seeds = task
    matrix, index = _SHARED["series"][series_key]
    spec = _SHARED["models"][spec_pos]
    calendar = index.sub(hist_lo, lo - hist_lo)
    out = np.empty((matrix.shape[0], hi - lo))
    i = 0
    try:
        with threadpool_limits(1):
            for i, row in enumerate(matrix):
                history = row[hist_lo:lo]
                model = fit_model(spec, history, calendar, seeds[i])
                out[i] = predict_recursive(model, history, calendar, hi - lo)
    except (LoadAnonError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return key, None, f"series {i}: {type(exc).__name__}: {exc}"
    return key, out, None


def run_experiment(config: ExperimentConfig, panel: ProfilePanel, workers: int = 1) -> ExperimentReport:
    """Run the full (repeat, level, model, window) grid.

    ``workers`` > 1 fans cells out to forked processes (0 = one per CPU).
    Results are merged in key order, so the report does not depend on it.
    """
    if panel.has_missing:
        raise LoadAnonError("panel has missing values; regularize it first")
    levels = config.levels
    windows = config.windows or default_windows(int(str(panel.index.start)[:4]))
    bounds = [w.bounds(panel.index) for w in windows]
    if any(hi - lo != TICKS_PER_DAY for lo, hi in bounds):
        raise OutOfRange("forecast days must contain 48 half-hour ticks")
    history = None if config.history_days is None else config.history_days * TICKS_PER_DAY

    series: dict = {}
    tasks = []
    actuals: dict = {}
    sizes: dict = {}
    group_meta: dict = {}
    subsample = config.sample_size is not None and config.sample_size < panel.n_series
    anon_cache: dict = {}
    for rep in range(config.repeats):
        data = sample_households(panel, config.sample_size, sample_seed(config.seed, rep)) \
            if subsample else panel
        for w_pos, (lo, hi) in enumerate(bounds):
            actuals[(rep, w_pos)] = aggregate_raw(data.values[:, lo:hi])
        for l_pos, level in enumerate(levels):
            if level == RAW:
                matrix, weights = data.values, np.ones(data.n_series)
            else:
                cache_key = (rep if subsample else 0, level)
                if cache_key not in anon_cache:
                    anon_cache[cache_key] = anonymize(data, int(level))
                anon = anon_cache[cache_key]
                matrix, weights = anon.centroids, anon.sizes.astype(np.float64)
                group_meta[str(level)] = {"n_groups": anon.assignment.n_groups,
                                          "degenerate": anon.assignment.degenerate}
            series[(rep, l_pos)] = (matrix, data.index)
            sizes[(rep, l_pos)] = weights
            for m_pos in range(len(config.models)):
                for w_pos, (lo, hi) in enumerate(bounds):
                    hist_lo = 0 if history is None else max(0, lo - history)
                    seeds = [model_seed(config.seed, rep, l_pos, m_pos, w_pos, i)
                             for i in range(matrix.shape[0])]
                    tasks.append(((rep, l_pos, m_pos, w_pos), (rep, l_pos), m_pos, lo, hi, hist_lo, seeds))

    _SHARED["series"] = series
    _SHARED["models"] = config.models
    try:
        n_workers = (os.cpu_count() or 1) if workers == 0 else workers
        if n_workers > 1 and len(tasks) > 1:
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(min(n_workers, len(tasks))) as pool:
                results = pool.map(_forecast_cell, tasks, chunksize=1)
        else:
            results = [_forecast_cell(t) for t in tasks]
    finally:
        _SHARED.clear()

    records, failures = [], []
    for (rep, l_pos, m_pos, w_pos), forecasts, error in sorted(results, key=lambda r: r[0]):
        level = levels[l_pos]
        base = {"k": level, "model": config.models[m_pos].name, "window": windows[w_pos].label,
                "repeat": rep + 1}
        if error is not None:
            failures.append({**base, "error": error})
            continue
        if level == RAW:
            agg = aggregate_raw(forecasts)
        else:
            agg = aggregate_anonymized(forecasts, sizes[(rep, l_pos)])
        try:
            s = score(actuals[(rep, w_pos)], agg)
        except LoadAnonError as exc:
            failures.append({**base, "error": str(exc)})
            continue
        records.append({**base, **s.as_dict(), "mape_excluded": s.mape_excluded})

    summary = []
    for level in levels:
        for spec in config.models:
            rows = [r for r in records if r["k"] == level and r["model"] == spec.name]
            entry = {"k": level, "model": spec.name, "n": len(rows)}
            for m in METRICS:
                vals = np.array([r[m] for r in rows])
                entry[f"{m}_mean"] = float(vals.mean()) if len(vals) else None
                entry[f"{m}_sd"] = float(vals.std()) if len(vals) else None
            summary.append(entry)

    meta = {
        "levels": levels,
        "models": [{"kind": s.kind, "period": s.period, "horizon": s.horizon,
                    "hyperparameters": dict(s.hyperparameters)} for s in config.models],
        "windows": [{"label": w.label, "train_end": w.train_end.isoformat(),
                     "forecast_day": w.forecast_day.isoformat()} for w in windows],
        "repeats": config.repeats,
        "seed": config.seed,
        "n_households": config.sample_size if subsample else panel.n_series,
        "history_days": config.history_days,
        "aggregation": "size-weighted group sum",
        "groups": group_meta,
        "rng": RNG_NAME,
        "expected_records": len(levels) * len(config.models) * len(windows) * config.repeats,
    }
    return ExperimentReport(records, failures, summary, meta)
