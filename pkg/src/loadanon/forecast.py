"""Day-ahead forecasters: seasonal naive, classical decomposition, lag ridge, MLP.

All models follow one protocol: ``fit_model(spec, series, calendar, seed)``
returns a fitted model and ``predict_recursive(model, history, calendar,
horizon)`` produces the ``horizon`` values that follow ``history``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Optional

import numpy as np
from numpy.typing import NDArray

from .errors import LoadAnonError, Singular, TooShort
from .panel import TimeIndex

log = logging.getLogger(__name__)

LAGS = (1, 48, 336)
ROLLING_WINDOW = 24
DIFFERENCES = (48, 336)
MAX_LAG = max(LAGS)
#: history needed before the differenced target is defined
TARGET_START = sum(DIFFERENCES)
FEATURE_NAMES = (
    "lag_1", "lag_48", "lag_336", "expanding_mean", "rolling_mean_24",
    *(f"dow_{d}" for d in range(7)),
)
KINDS = ("seasonal-naive", "decomposition", "lag-linear", "mlp")

MLP_DEFAULTS = MappingProxyType({
    "input_size": 500,
    "hidden": 64,
    "epochs": 50,
    "learning_rate": 1e-3,
    "batch_size": 32,
    "max_windows": 1024,
    "optimizer": "adam",
    "shuffle": True,
})
LAG_LINEAR_DEFAULTS = MappingProxyType({"l2": 1e-3})


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    period: int = 48
    horizon: int = 48
    hyperparameters: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise LoadAnonError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.period < 2:
            raise LoadAnonError("period must be >= 2")
        if self.horizon < 1:
            raise LoadAnonError("horizon must be >= 1")
        defaults = {"mlp": MLP_DEFAULTS, "lag-linear": LAG_LINEAR_DEFAULTS}.get(self.kind, {})
        unknown = set(self.hyperparameters) - set(defaults)
        if unknown:
            raise LoadAnonError(f"unknown hyperparameter(s) for {self.kind}: {sorted(unknown)}")
        merged = {**defaults, **dict(self.hyperparameters)}
        object.__setattr__(self, "hyperparameters", MappingProxyType(merged))

    @property
    def name(self) -> str:
        return self.kind


# ---------------------------------------------------------------- features


@dataclass(frozen=True)
class FeatureMatrix:
    """Lag/window/calendar features, one row per timestamp ``positions[i]``.

    ``target`` is the series differenced at 48 then 336 ticks; it is NaN for
    rows too early for both differences to exist.
    """

    X: NDArray[np.float64]
    target: NDArray[np.float64]
    positions: NDArray[np.int64]
    names: tuple[str, ...] = FEATURE_NAMES
    differences: tuple[int, ...] = DIFFERENCES

    @property
    def usable(self) -> NDArray[np.bool_]:
        return np.isfinite(self.target)

    def column(self, name: str) -> NDArray[np.float64]:
        return self.X[:, self.names.index(name)]


def _dow_onehot(days: NDArray[np.int64]) -> NDArray[np.float64]:
    out = np.zeros((len(days), 7))
    out[np.arange(len(days)), days] = 1.0
    return out


def _future_dow(calendar: TimeIndex, positions: NDArray[np.int64]) -> NDArray[np.int64]:
    stamps = calendar.start + positions * calendar.step
    return (stamps.astype("datetime64[D]").astype(np.int64) + 3) % 7


def difference_target(y: NDArray[np.float64]) -> NDArray[np.float64]:
    """Apply the 48- then 336-tick differences; undefined leading values are NaN."""
    z = np.asarray(y, dtype=np.float64).copy()
    for lag in DIFFERENCES:
        shifted = np.full_like(z, np.nan)
        shifted[lag:] = z[:-lag]
        z = z - shifted
    return z


def invert_differences(z: float | NDArray, y: NDArray[np.float64], t) -> float | NDArray:
    """Recover ``y[t]`` from the differenced value at ``t`` and earlier levels.

    The 336 difference is undone first, then the 48 one.
    """
    t = np.asarray(t)
    d = z + (y[t - 336] - y[t - 336 - 48])
    return d + y[t - 48]


def make_features(series, calendar: TimeIndex) -> FeatureMatrix:
    y = np.asarray(series, dtype=np.float64)
    n = len(y)
    if n <= MAX_LAG:
        raise TooShort(f"series of length {n} is too short for lag {MAX_LAG}")
    if calendar.length < n:
        raise TooShort("calendar shorter than series")
    t = np.arange(MAX_LAG, n)
    csum = np.concatenate(([0.0], np.cumsum(y)))
    cols = [y[t - lag] for lag in LAGS]
    cols.append(csum[t] / t)
    cols.append((csum[t] - csum[t - ROLLING_WINDOW]) / ROLLING_WINDOW)
    X = np.column_stack(cols + [_dow_onehot(calendar.day_of_week()[t])])
    return FeatureMatrix(X, difference_target(y)[t], t)


def _feature_row(y: list[float], total: float, day: int) -> NDArray[np.float64]:
    n = len(y)
    row = np.empty(len(FEATURE_NAMES))
    row[0], row[1], row[2] = y[n - 1], y[n - 48], y[n - 336]
    row[3] = total / n
    row[4] = sum(y[n - ROLLING_WINDOW:]) / ROLLING_WINDOW
    row[5:] = 0.0
    row[5 + day] = 1.0
    return row


# ---------------------------------------------------------------- baselines


def seasonal_naive_forecast(series, period: int = 48, horizon: int = 48) -> NDArray[np.float64]:
    y = np.asarray(series, dtype=np.float64)
    if len(y) < period:
        raise TooShort(f"need at least one season ({period}) of history, got {len(y)}")
    h = np.arange(1, horizon + 1)
    last = len(y) - 1
    return y[last + h - period * np.ceil(h / period).astype(np.int64)].copy()


def classical_decompose(series, period: int):
    """Centred moving-average trend plus per-phase mean seasonal pattern.

    Returns ``(trend, trend_positions, seasonal)``; ``seasonal[p]`` belongs
    to positions congruent to ``p`` modulo ``period`` and sums to zero.
    """
    y = np.asarray(series, dtype=np.float64)
    n = len(y)
    if n < 2 * period:
        raise TooShort(f"decomposition needs {2 * period} observations, got {n}")
    if period % 2 == 0:
        w = np.full(period + 1, 1.0 / period)
        w[0] = w[-1] = 0.5 / period
    else:
        w = np.full(period, 1.0 / period)
    half = len(w) // 2
    trend = np.convolve(y, w, mode="valid")
    pos = np.arange(half, half + len(trend))
    detrended = y[pos] - trend
    sums = np.bincount(pos % period, weights=detrended, minlength=period)
    counts = np.bincount(pos % period, minlength=period)
    seasonal = sums / counts
    seasonal -= seasonal.mean()
    return trend, pos, seasonal


def decomposition_forecast(series, period: int = 48, horizon: int = 48) -> NDArray[np.float64]:
    trend, pos, seasonal = classical_decompose(series, period)
    span = min(period, len(trend) - 1)
    slope = (trend[-1] - trend[-1 - span]) / span if span > 0 else 0.0
    future = len(series) - 1 + np.arange(1, horizon + 1)
    return trend[-1] + slope * (future - pos[-1]) + seasonal[future % period]


# ---------------------------------------------------------------- fitted models


class FittedModel:
    """Common base; subclasses hold kind-specific learned state."""

    spec: ModelSpec

    def predict(self, history, calendar: TimeIndex, horizon: int) -> NDArray[np.float64]:
        raise NotImplementedError


@dataclass(frozen=True)
class SeasonalNaiveModel(FittedModel):
    spec: ModelSpec

    def predict(self, history, calendar, horizon):
        return seasonal_naive_forecast(history, self.spec.period, horizon)


@dataclass(frozen=True)
class DecompositionModel(FittedModel):
    """Local model: forecasting re-decomposes whatever history it is given."""

    spec: ModelSpec
    seasonal: NDArray[np.float64] = field(repr=False)
    trend_last: float = 0.0

    def predict(self, history, calendar, horizon):
        return decomposition_forecast(history, self.spec.period, horizon)


@dataclass(frozen=True)
class LagLinearModel(FittedModel):
    spec: ModelSpec
    coef: NDArray[np.float64] = field(repr=False)
    intercept: float = 0.0
    feature_mean: NDArray[np.float64] = field(default=None, repr=False)
    feature_scale: NDArray[np.float64] = field(default=None, repr=False)

    def predict(self, history, calendar, horizon):
        y = [float(v) for v in np.asarray(history, dtype=np.float64)]
        n0 = len(y)
        if n0 < TARGET_START:
            raise TooShort(f"lag-linear needs {TARGET_START} observations of history, got {n0}")
        days = _future_dow(calendar, np.arange(n0, n0 + horizon))
        total = float(np.sum(history))
        for h in range(horizon):
            x = _feature_row(y, total, int(days[h]))
            z = self.intercept + float(x @ self.coef)
            n = len(y)
            # undo the 336 difference, then the 48 one
            value = z + (y[n - 336] - y[n - 384]) + y[n - 48]
            y.append(value)
            total += value
        return np.asarray(y[n0:])


def fit_lag_linear(features: FeatureMatrix, l2: float = 1e-3, spec: Optional[ModelSpec] = None
                   ) -> LagLinearModel:
    """Closed-form ridge regression on standardised features.

    The intercept is not penalised. With ``l2 == 0`` a rank-deficient design
    raises :class:`Singular`.
    """
    if l2 < 0:
        raise LoadAnonError("l2 must be non-negative")
    ok = features.usable
    X, y = features.X[ok], features.target[ok]
    if len(y) < 1:
        raise TooShort("no usable training rows")
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Xs = (X - mu) / sd
    ybar = float(y.mean())
    gram = Xs.T @ Xs
    if l2 == 0 and np.linalg.matrix_rank(Xs) < Xs.shape[1]:
        raise Singular("normal matrix is singular; use l2 > 0")
    w = np.linalg.solve(gram + l2 * np.eye(gram.shape[0]), Xs.T @ (y - ybar))
    coef = w / sd
    intercept = ybar - float(mu @ coef)
    spec = spec or ModelSpec("lag-linear", hyperparameters={"l2": l2})
    return LagLinearModel(spec, coef, intercept, mu, sd)


# ---------------------------------------------------------------- MLP


def mlp_loss_and_grad(params: dict, X, Y):
    """Mean squared error of a tanh single-hidden-layer net and its gradient."""
    W1, b1, W2, b2 = params["W1"], params["b1"], params["W2"], params["b2"]
    H = np.tanh(X @ W1 + b1)
    out = H @ W2 + b2
    err = out - Y
    m = err.size
    loss = float(np.sum(err**2) / m)
    g_out = 2.0 * err / m
    g_W2 = H.T @ g_out
    g_b2 = g_out.sum(axis=0)
    g_pre = (g_out @ W2.T) * (1.0 - H**2)
    g_W1 = X.T @ g_pre
    g_b1 = g_pre.sum(axis=0)
    return loss, {"W1": g_W1, "b1": g_b1, "W2": g_W2, "b2": g_b2}


def mlp_forward(params: dict, X):
    return np.tanh(X @ params["W1"] + params["b1"]) @ params["W2"] + params["b2"]


def robust_scale_params(series) -> tuple[float, float]:
    """Median and interquartile range; an IQR of zero falls back to 1."""
    y = np.asarray(series, dtype=np.float64)
    median = float(np.median(y))
    q1, q3 = np.percentile(y, [25, 75])
    iqr = float(q3 - q1)
    if iqr == 0:
        log.warning("interquartile range is zero; using scale 1")
        iqr = 1.0
    return median, iqr


@dataclass(frozen=True)
class MLPModel(FittedModel):
    spec: ModelSpec
    params: dict = field(repr=False)
    median: float = 0.0
    scale: float = 1.0
    loss_history: tuple[float, ...] = field(default=(), repr=False)

    @property
    def input_size(self) -> int:
        return self.params["W1"].shape[0]

    def predict(self, history, calendar, horizon):
        y = list(np.asarray(history, dtype=np.float64))
        if len(y) < self.input_size:
            raise TooShort(f"mlp needs {self.input_size} observations of history, got {len(y)}")
        out: list[float] = []
        while len(out) < horizon:
            window = (np.asarray(y[-self.input_size:]) - self.median) / self.scale
            step = mlp_forward(self.params, window[None, :])[0] * self.scale + self.median
            out.extend(step.tolist())
            y.extend(step.tolist())
        return np.asarray(out[:horizon])


def _sliding_windows(s, input_size, horizon, max_windows):
    n_win = len(s) - input_size - horizon + 1
    first = max(0, n_win - max_windows) if max_windows else 0
    starts = np.arange(first, n_win)
    idx_in = starts[:, None] + np.arange(input_size)
    idx_out = starts[:, None] + input_size + np.arange(horizon)
    return s[idx_in], s[idx_out]


def fit_mlp(series, spec: ModelSpec, seed: int = 0) -> MLPModel:
    """Train a single-hidden-layer network mapping the last ``input_size``
    robust-scaled values to the next ``horizon`` values.

    Training uses the most recent ``max_windows`` sliding windows, mini-batch
    updates (Adam or plain SGD) and a generator seeded with ``seed``.
    """
    hp = spec.hyperparameters
    input_size, hidden = int(hp["input_size"]), int(hp["hidden"])
    horizon = spec.horizon
    y = np.asarray(series, dtype=np.float64)
    if len(y) < input_size + horizon:
        raise TooShort(f"mlp needs {input_size + horizon} observations, got {len(y)}")
    median, scale = robust_scale_params(y)
    X, Y = _sliding_windows((y - median) / scale, input_size, horizon, int(hp["max_windows"]))

    rng = np.random.Generator(np.random.PCG64(seed))
    params = {
        "W1": rng.normal(0.0, 1.0 / np.sqrt(input_size), (input_size, hidden)),
        "b1": np.zeros(hidden),
        "W2": rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, horizon)),
        "b2": np.zeros(horizon),
    }
    lr = float(hp["learning_rate"])
    batch = max(1, min(int(hp["batch_size"]), len(X)))
    adam = hp["optimizer"] == "adam"
    if hp["optimizer"] not in ("adam", "sgd"):
        raise LoadAnonError(f"unknown optimizer {hp['optimizer']!r}")
    m1 = {k: np.zeros_like(v) for k, v in params.items()}
    m2 = {k: np.zeros_like(v) for k, v in params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step_count = 0
    history = []
    for _ in range(int(hp["epochs"])):
        order = rng.permutation(len(X)) if hp["shuffle"] else np.arange(len(X))
        for lo in range(0, len(X), batch):
            rows = order[lo:lo + batch]
            _, grads = mlp_loss_and_grad(params, X[rows], Y[rows])
            step_count += 1
            for key, g in grads.items():
                if adam:
                    m1[key] = beta1 * m1[key] + (1 - beta1) * g
                    m2[key] = beta2 * m2[key] + (1 - beta2) * g * g
                    mhat = m1[key] / (1 - beta1**step_count)
                    vhat = m2[key] / (1 - beta2**step_count)
                    params[key] = params[key] - lr * mhat / (np.sqrt(vhat) + eps)
                else:
                    params[key] = params[key] - lr * g
        history.append(mlp_loss_and_grad(params, X, Y)[0])
    return MLPModel(spec, params, median, scale, tuple(history))


# ---------------------------------------------------------------- dispatch


def fit_model(spec: ModelSpec, series, calendar: TimeIndex, seed: int = 0) -> FittedModel:
    y = np.asarray(series, dtype=np.float64)
    if spec.kind == "seasonal-naive":
        if len(y) < spec.period:
            raise TooShort(f"need at least {spec.period} observations")
        return SeasonalNaiveModel(spec)
    if spec.kind == "decomposition":
        trend, _, seasonal = classical_decompose(y, spec.period)
        return DecompositionModel(spec, seasonal, float(trend[-1]))
    if spec.kind == "lag-linear":
        return fit_lag_linear(make_features(y, calendar), float(spec.hyperparameters["l2"]), spec)
    return fit_mlp(y, spec, seed)


def predict_recursive(model: FittedModel, history, calendar: TimeIndex, horizon: int
                      ) -> NDArray[np.float64]:
    """Forecast the ``horizon`` values following ``history``.

    ``calendar`` is the time index of ``history``; future ticks continue it.
    """
    out = np.asarray(model.predict(np.asarray(history, dtype=np.float64), calendar, horizon))
    if out.shape != (horizon,) or not np.all(np.isfinite(out)):
        raise LoadAnonError(f"{model.spec.kind} produced a non-finite or mis-sized forecast")
    return out
