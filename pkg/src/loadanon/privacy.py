"""Utility-loss and volatility measures for microaggregated panels."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import OutOfRange, ShapeMismatch, TooFewPoints, TooShort
from .ingest import RNG_NAME, sample_households
from .mdav import AnonymizedPanel, anonymize
from .panel import ProfilePanel

log = logging.getLogger(__name__)


def _aligned(original: ProfilePanel, anonymized: AnonymizedPanel) -> NDArray[np.float64]:
    """Expanded anonymized values in the row order of ``original``."""
    if original.n_ticks != anonymized.centroids.shape[1]:
        raise ShapeMismatch(f"T differs: {original.n_ticks} vs {anonymized.centroids.shape[1]}")
    expanded = anonymized.expanded()
    if anonymized.original_ids == original.ids:
        return expanded
    pos = {sid: i for i, sid in enumerate(anonymized.original_ids)}
    try:
        return expanded[[pos[sid] for sid in original.ids]]
    except KeyError as exc:
        raise ShapeMismatch(f"series {exc.args[0]!r} missing from anonymized panel") from None


def sse(original: ProfilePanel, anonymized: AnonymizedPanel) -> float:
    """Sum of squared differences between each record and its centroid."""
    return float(np.sum((original.values - _aligned(original, anonymized)) ** 2))


def column_sigma(values: NDArray[np.float64]) -> NDArray[np.float64]:
    """Per-column sample standard deviation (ddof=1); 0 for a single row."""
    if values.shape[0] < 2:
        return np.zeros(values.shape[1])
    return values.std(axis=0, ddof=1)


def information_loss(original: ProfilePanel, anonymized: AnonymizedPanel) -> float:
    """Mean absolute deviation scaled by sqrt(2) times each column's sigma.

    Zero-sigma columns with zero deviation count as zero loss; zero-sigma
    columns with nonzero deviation are left out of both sum and count.
    """
    X = original.values
    dev = np.abs(X - _aligned(original, anonymized))
    sigma = column_sigma(X)
    flat = sigma == 0
    col_dev = dev.sum(axis=0)
    dropped = flat & (col_dev > 0)
    if dropped.any():
        log.warning("information loss: %d zero-variance column(s) excluded", int(dropped.sum()))
    live = ~flat
    total = float(np.sum(col_dev[live] / (np.sqrt(2.0) * sigma[live])))
    n_cols = X.shape[1] - int(dropped.sum())
    if n_cols == 0:
        return 0.0
    return total / (n_cols * X.shape[0])


def relative_returns(series) -> tuple[NDArray[np.float64], int]:
    """Period-over-period relative changes and the count of zero-denominator steps."""
    x = np.asarray(series, dtype=np.float64)
    prev, nxt = x[:-1], x[1:]
    ok = prev != 0
    return (nxt[ok] - prev[ok]) / prev[ok], int((~ok).sum())


def returns_volatility(series) -> float:
    """Sample standard deviation of the relative returns of a series."""
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1 or len(x) < 3:
        raise TooShort("volatility needs at least 3 observations")
    returns, _ = relative_returns(x)
    if len(returns) < 2:
        raise TooShort("fewer than 2 defined returns")
    return float(np.std(returns, ddof=1))


@dataclass(frozen=True)
class VolatilitySummary:
    per_group: tuple[float, ...]
    mean: float
    sd: float
    excluded_returns: int
    skipped_groups: int


def panel_volatility(anonymized: AnonymizedPanel) -> VolatilitySummary:
    """Returns volatility of each centroid, summarised by mean and (population) sd."""
    vols, excluded, skipped = [], 0, 0
    for g, centroid in enumerate(anonymized.centroids):
        _, zeros = relative_returns(centroid)
        try:
            vols.append(returns_volatility(centroid))
        except TooShort as exc:
            log.warning("group %d skipped in volatility: %s", g, exc)
            skipped += 1
            continue
        excluded += zeros
    if not vols:
        return VolatilitySummary((), float("nan"), float("nan"), excluded, skipped)
    arr = np.asarray(vols)
    return VolatilitySummary(tuple(vols), float(arr.mean()), float(arr.std()), excluded, skipped)


@dataclass(frozen=True)
class DecayFit:
    """``f(t) = a * exp(-t / b)`` fitted by least squares."""

    a: float
    b: float
    r2: float
    converged: bool
    method: str = "gauss-newton"

    def __call__(self, t):
        return self.a * np.exp(-np.asarray(t, dtype=np.float64) / self.b)


def _r2(y, fitted) -> float:
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else -np.inf
    return 1.0 - ss_res / ss_tot


def _best_amplitude(x, y, b):
    e = np.exp(-x / b)
    denom = float(e @ e)
    return float(e @ y) / denom if denom > 0 else 0.0


def _grid_fit(x, y) -> tuple[float, float]:
    span = max(float(np.ptp(x)), float(np.max(np.abs(x))), 1.0)
    best = None
    for b in np.geomspace(span * 1e-3, span * 1e3, 601):
        a = _best_amplitude(x, y, b)
        loss = float(np.sum((y - a * np.exp(-x / b)) ** 2))
        if best is None or loss < best[0]:
            best = (loss, a, float(b))
    return best[1], best[2]


def _gauss_newton(x, y, p0, max_iter: int, step_tol: float):
    """Damped Gauss-Newton on ``a * exp(-x / b)``; returns (params, loss, converged)."""

    def loss(params):
        return float(np.sum((y - params[0] * np.exp(-x / params[1])) ** 2))

    p = np.asarray(p0, dtype=np.float64)
    current = loss(p)
    for _ in range(max_iter):
        a, b = p
        e = np.exp(-x / b)
        jac = np.column_stack((e, a * e * x / b**2))
        step, *_ = np.linalg.lstsq(jac, y - a * e, rcond=None)
        t = 1.0
        while t > 1e-12:
            trial = p + t * step
            if trial[1] > 0 and loss(trial) <= current:
                break
            t *= 0.5
        else:
            # no descent left at working precision
            return p, current, True
        taken = np.max(np.abs(t * step) / np.maximum(np.abs(p), 1e-300))
        p = trial
        current = loss(p)
        if taken < step_tol:
            return p, current, True
    return p, current, False


def fit_exp_decay(xs: Sequence[float], ys: Sequence[float], max_iter: int = 100,
                  step_tol: float = 1e-10) -> DecayFit:
    """Least-squares fit of ``a * exp(-x / b)``.

    Starts from a straight-line fit of ``log y`` against ``x`` and refines
    with damped Gauss-Newton (at most ``max_iter`` steps, relative step
    tolerance ``step_tol``). Long flat tails can pull the log-linear start
    into the ``b -> inf`` valley, so a second refinement starts from a grid
    search over ``b`` and the lower-loss converged result wins.

    If any ``y`` is non-positive the log start is unavailable and the grid
    search result is returned unrefined.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeMismatch("xs and ys must be 1-D and the same length")
    if len(x) < 3:
        raise TooFewPoints(f"need at least 3 points, got {len(x)}")

    if np.any(y <= 0):
        a, b = _grid_fit(x, y)
        return DecayFit(a, b, _r2(y, a * np.exp(-x / b)), converged=False, method="grid")

    slope, intercept = np.polyfit(x, np.log(y), 1)
    if slope < 0:
        a0, b0 = float(np.exp(intercept)), float(-1.0 / slope)
    else:
        a0, b0 = _grid_fit(x, y)
    start = DecayFit(a0, b0, _r2(y, a0 * np.exp(-x / b0)), converged=False, method="log-linear")

    best = None
    for p0 in ((a0, b0), _grid_fit(x, y)):
        p, loss, ok = _gauss_newton(x, y, p0, max_iter, step_tol)
        if ok and p[1] > 0 and np.all(np.isfinite(p)) and (best is None or loss < best[1]):
            best = (p, loss)
    if best is None:
        log.warning("exponential decay fit did not converge; returning initial estimate")
        return start
    a, b = float(best[0][0]), float(best[0][1])
    return DecayFit(a, b, _r2(y, a * np.exp(-x / b)), converged=True)


@dataclass(frozen=True)
class PrivacyReport:
    k: int
    sse: float
    il: float
    sigma: NDArray[np.float64] = field(repr=False)
    volatility_per_group: tuple[float, ...] = field(repr=False)
    volatility_mean: float = 0.0
    volatility_sd: float = 0.0
    excluded_returns: int = 0
    n_groups: int = 0
    degenerate: bool = False


def privacy_report(panel: ProfilePanel, k: int, anonymized: Optional[AnonymizedPanel] = None
                   ) -> PrivacyReport:
    anon = anonymized if anonymized is not None else anonymize(panel, k)
    vol = panel_volatility(anon)
    return PrivacyReport(
        k=k,
        sse=sse(panel, anon),
        il=information_loss(panel, anon),
        sigma=column_sigma(panel.values),
        volatility_per_group=vol.per_group,
        volatility_mean=vol.mean,
        volatility_sd=vol.sd,
        excluded_returns=vol.excluded_returns,
        n_groups=anon.assignment.n_groups,
        degenerate=anon.assignment.degenerate,
    )


@dataclass
class SweepEntry:
    k: int
    sse: float
    sse_sd: float
    il: float
    il_sd: float
    volatility_mean: float
    volatility_mean_sd: float
    volatility_sd: float
    excluded_returns: int
    replicate_count: int
    n_groups: int
    degenerate: bool


@dataclass
class SweepResult:
    entries: list[SweepEntry]
    fit: Optional[DecayFit]
    fit_status: str
    rng: str
    sample_size: int

    def to_json_obj(self) -> dict:
        fit = {"a": None, "b": None, "r2": None, "converged": False, "method": None}
        if self.fit is not None:
            fit = {"a": self.fit.a, "b": self.fit.b, "r2": self.fit.r2,
                   "converged": self.fit.converged, "method": self.fit.method}
        fit["status"] = self.fit_status
        return {
            "levels": [asdict(e) for e in self.entries],
            "decay_fit": fit,
            "rng": self.rng,
            "sample_size": self.sample_size,
        }


def _mean_sd(values) -> tuple[float, float]:
    """Mean and population sd; identical replicates give exactly (value, 0)."""
    v = np.asarray(values, dtype=np.float64)
    if np.all(v == v[0]):
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std())


def privacy_sweep(
    panel: ProfilePanel,
    ladder: Sequence[int],
    replicates: int = 10,
    seed: int = 0,
    sample_size: Optional[int] = None,
) -> SweepResult:
    """Evaluate SSE, IL and volatility at every k, averaged over replicates.

    Replicate ``r`` microaggregates ``sample_size`` households drawn with the
    ``r``-th child of ``SeedSequence(seed)``. Without subsampling MDAV is
    deterministic, so every replicate equals the first and is computed once.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    n = panel.n_series if sample_size is None else int(sample_size)
    if not 1 <= n <= panel.n_series:
        raise OutOfRange(f"sample size {n} outside 1..{panel.n_series}")
    subsample = n < panel.n_series
    children = np.random.SeedSequence(seed).spawn(replicates)

    per_rep: list[list[PrivacyReport]] = []
    for r in range(replicates if subsample else 1):
        if subsample:
            child_seed = int(children[r].generate_state(1, np.uint64)[0])
            data = sample_households(panel, n, child_seed)
        else:
            data = panel
        per_rep.append([privacy_report(data, k) for k in ladder])
    entries = []
    for j, k in enumerate(ladder):
        reps = [rep[j] for rep in per_rep]
        sse_m, sse_sd = _mean_sd([r.sse for r in reps])
        il_m, il_sd = _mean_sd([r.il for r in reps])
        vm_m, vm_sd = _mean_sd([r.volatility_mean for r in reps])
        entries.append(SweepEntry(
            k=int(k),
            sse=sse_m, sse_sd=sse_sd,
            il=il_m, il_sd=il_sd,
            volatility_mean=vm_m, volatility_mean_sd=vm_sd,
            volatility_sd=_mean_sd([r.volatility_sd for r in reps])[0],
            # counted over the replicates actually computed
            excluded_returns=int(sum(r.excluded_returns for r in reps)),
            replicate_count=replicates,
            n_groups=reps[0].n_groups,
            degenerate=any(r.degenerate for r in reps),
        ))

    xs = [e.k for e in entries]
    ys = [e.volatility_mean for e in entries]
    if len(xs) < 3:
        fit, status = None, "insufficient-points"
    elif not np.all(np.isfinite(ys)):
        fit, status = None, "undefined-volatility"
    else:
        fit = fit_exp_decay(xs, ys)
        status = "converged" if fit.converged else "not-converged"
    return SweepResult(entries, fit, status, RNG_NAME, n)
