"""MDAV microaggregation over whole load-profile vectors.

The kernel never materialises an N x N distance matrix. Each scan computes
approximate squared distances for every row with one BLAS matrix-vector
product (``|x|^2 - 2 x.c + |c|^2``), then re-evaluates the handful of rows
that could be affected by rounding with the direct ``sum((x - c)^2)`` form.
Decisions therefore match a naive implementation exactly, including the
tie-break: among equal distances the lexicographically smallest id wins.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from numpy.typing import NDArray

from .errors import LoadAnonError, ShapeMismatch
from .ingest import write_wide_csv
from .panel import ProfilePanel

log = logging.getLogger(__name__)

_EPS = np.finfo(np.float64).eps


def distance(a, b) -> float:
    """Euclidean distance between two equal-length vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


@dataclass(frozen=True)
class GroupAssignment:
    """A partition of series ids into groups of size k..2k-1.

    ``degenerate`` is set when fewer than k series were available and a single
    undersized group was formed instead.
    """

    k: int
    groups: tuple[tuple[str, ...], ...]
    degenerate: bool = False

    @cached_property
    def group_of(self) -> dict[str, int]:
        return {sid: g for g, members in enumerate(self.groups) for sid in members}

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(m) for m in self.groups)

    @property
    def n_groups(self) -> int:
        return len(self.groups)


class _Scanner:
    """Distance scans over the active rows of a row-major matrix."""

    def __init__(self, X: NDArray[np.float64]):
        self.X = X
        self.norms = np.einsum("ij,ij->i", X, X)
        self.max_norm = float(np.sqrt(self.norms.max())) if len(X) else 0.0
        self.n_cols = X.shape[1]

    def _approx(self, c: NDArray[np.float64]) -> tuple[NDArray[np.float64], float]:
        cc = float(c @ c)
        approx = self.norms - 2.0 * (self.X @ c) + cc
        # generous bound on the rounding error of the expansion
        scale = (self.max_norm + np.sqrt(cc)) ** 2
        tol = 8.0 * (self.n_cols + 4) * _EPS * scale + 1e-300
        return approx, tol

    def exact(self, rows: NDArray[np.intp], c: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.sum((self.X[rows] - c) ** 2, axis=1)

    def farthest(self, c: NDArray[np.float64], mask: NDArray[np.bool_]) -> int:
        approx, tol = self._approx(c)
        approx[~mask] = -np.inf
        top = approx.max()
        cands = np.flatnonzero(mask & (approx >= top - 2 * tol))
        exact = self.exact(cands, c)
        # cands ascend by row, rows ascend by id: first max is the smallest id
        return int(cands[np.argmax(exact)])

    def nearest(self, c: NDArray[np.float64], mask: NDArray[np.bool_], m: int) -> NDArray[np.intp]:
        if m <= 0:
            return np.empty(0, dtype=np.intp)
        pool = np.flatnonzero(mask)
        if m >= len(pool):
            return pool
        approx, tol = self._approx(c)
        approx[~mask] = np.inf
        cutoff = np.partition(approx, m - 1)[m - 1]
        cands = np.flatnonzero(mask & (approx <= cutoff + 2 * tol))
        exact = self.exact(cands, c)
        order = np.lexsort((cands, exact))
        return cands[order[:m]]

    def mean(self, mask: NDArray[np.bool_]) -> NDArray[np.float64]:
        weights = mask.astype(np.float64)
        return (weights @ self.X) / weights.sum()


def mdav_partition(
    panel: ProfilePanel,
    k: int,
    prescale: Optional[Callable[[NDArray[np.float64]], NDArray[np.float64]]] = None,
) -> GroupAssignment:
    """Partition the panel's series with MDAV.

    While at least 3k records remain, two groups are formed around the record
    farthest from the centroid (x_r) and the record farthest from x_r (x_s).
    With 2k..3k-1 left, one group forms around the record farthest from the
    centroid and the rest become the last group; with fewer than 2k left they
    form one group.

    x_s is chosen among the remaining records other than x_r and is kept out
    of x_r's group, so both seeds always lead their own group.

    ``prescale`` maps the (N, T) value matrix to the matrix actually
    clustered, e.g. per-series standardisation. Group means are still taken
    on raw values by :func:`build_anonymized_panel`.
    """
    if int(k) != k or k < 1:
        raise LoadAnonError(f"k must be a positive integer, got {k!r}")
    k = int(k)
    n = panel.n_series
    if n < 1:
        raise LoadAnonError("panel has no series")
    if panel.has_missing:
        raise LoadAnonError("panel has missing values; regularize it first")

    order = sorted(range(n), key=lambda i: panel.ids[i])
    ids = [panel.ids[i] for i in order]
    X = panel.values if order == list(range(n)) else panel.values[order]
    if prescale is not None:
        X = np.ascontiguousarray(prescale(X), dtype=np.float64)
        if X.shape[0] != n:
            raise ShapeMismatch("prescale must keep one row per series")

    if n < k:
        log.warning("k=%d exceeds the %d available series; forming one degenerate group", k, n)
        return GroupAssignment(k, (tuple(ids),), degenerate=True)

    scan = _Scanner(X)
    active = np.ones(n, dtype=bool)
    remaining = n
    groups: list[NDArray[np.intp]] = []

    def take(rows: NDArray[np.intp]) -> None:
        nonlocal remaining
        active[rows] = False
        remaining -= len(rows)
        groups.append(rows)

    while remaining >= 3 * k:
        r = scan.farthest(scan.mean(active), active)
        others = active.copy()
        others[r] = False
        s = scan.farthest(X[r], others)
        others[s] = False
        take(np.concatenate(([r], scan.nearest(X[r], others, k - 1))))
        others = active.copy()
        others[s] = False
        take(np.concatenate(([s], scan.nearest(X[s], others, k - 1))))

    if remaining >= 2 * k:
        r = scan.farthest(scan.mean(active), active)
        others = active.copy()
        others[r] = False
        take(np.concatenate(([r], scan.nearest(X[r], others, k - 1))))
    if remaining > 0:
        take(np.flatnonzero(active))

    members = tuple(tuple(ids[i] for i in sorted(rows.tolist())) for rows in groups)
    return GroupAssignment(k, members)


@dataclass(frozen=True)
class AnonymizedPanel:
    """Group centroids plus the per-record view that replaces each row by its centroid."""

    assignment: GroupAssignment
    original_ids: tuple[str, ...]
    index: object  # TimeIndex
    centroids: NDArray[np.float64] = field(repr=False)
    row_group: NDArray[np.intp] = field(repr=False)

    @property
    def k(self) -> int:
        return self.assignment.k

    @property
    def sizes(self) -> NDArray[np.int64]:
        return np.asarray(self.assignment.sizes, dtype=np.int64)

    def expanded(self) -> NDArray[np.float64]:
        """N x T matrix, row i = centroid of the group holding series i."""
        return self.centroids[self.row_group]

    def centroid_panel(self) -> ProfilePanel:
        names = tuple(f"group_{g}" for g in range(self.assignment.n_groups))
        return ProfilePanel(names, self.index, self.centroids)


def build_anonymized_panel(panel: ProfilePanel, assignment: GroupAssignment) -> AnonymizedPanel:
    if sorted(panel.ids) != sorted(assignment.group_of):
        raise ShapeMismatch("assignment does not partition the panel's ids")
    pos = {sid: i for i, sid in enumerate(panel.ids)}
    row_group = np.empty(panel.n_series, dtype=np.intp)
    centroids = np.empty((assignment.n_groups, panel.n_ticks))
    for g, members in enumerate(assignment.groups):
        rows = [pos[sid] for sid in members]
        row_group[rows] = g
        centroids[g] = panel.values[rows].mean(axis=0)
    centroids.setflags(write=False)
    row_group.setflags(write=False)
    return AnonymizedPanel(assignment, panel.ids, panel.index, centroids, row_group)


def anonymize(panel: ProfilePanel, k: int, prescale=None) -> AnonymizedPanel:
    return build_anonymized_panel(panel, mdav_partition(panel, k, prescale))


def write_assignment_csv(assignment: GroupAssignment, dest) -> None:
    rows = sorted(assignment.group_of.items())
    lines = ["series_id,group_index"] + [f"{_csv_field(sid)},{g}" for sid, g in rows]
    text = "\n".join(lines) + "\n"
    if hasattr(dest, "write"):
        dest.write(text)
    else:
        with open(dest, "w", newline="") as fh:
            fh.write(text)


def _csv_field(value: str) -> str:
    if any(ch in value for ch in ',"\n\r'):
        return '"' + value.replace('"', '""') + '"'
    return value


def write_centroids_csv(anonymized: AnonymizedPanel, dest) -> None:
    write_wide_csv(anonymized.centroid_panel(), dest)
