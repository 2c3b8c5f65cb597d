"""Nearest-neighbor donor search and fractional hot-deck weights.

Donors for a missing item are the item respondents in the recipient's
blocking cell (exact match on the configured categorical variables) that are
closest under a scaled L1 distance on the configured numeric variables.
Ties are broken by the smaller ``person_id``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .core import Frame


class ThinNeighborhoodError(ValueError):
    """A blocking cell holds fewer item respondents than donors requested."""

    def __init__(self, item: int, cell: tuple, available: int, needed: int):
        self.item, self.cell, self.available, self.needed = item, cell, available, needed
        super().__init__(
            f"item {item + 1}: blocking cell {cell} has {available} respondents, "
            f"{needed} donors needed"
        )


TIE_BREAKS = ("person_id",)


@dataclass
class MetricConfig:
    """Record metric: exact-match blocking, then scaled L1 on numeric variables.

    Parameters
    ----------
    blocking : sequence of str
        Column names (built-in fields or covariates) that must match exactly.
    numeric : mapping of str to float
        Column name to nonnegative scale multiplier.
    tie_break : str
        Only ``"person_id"`` (smaller id wins) is defined.
    """

    blocking: Sequence[str] = ()
    numeric: Mapping[str, float] = field(default_factory=dict)
    tie_break: str = "person_id"

    def __post_init__(self):
        self.blocking = tuple(self.blocking)
        self.numeric = dict(self.numeric)
        if not self.blocking and not self.numeric:
            raise ValueError("metric needs at least one blocking or numeric variable")
        if any(not s >= 0 for s in self.numeric.values()):
            raise ValueError("numeric scales must be nonnegative")
        if self.tie_break not in TIE_BREAKS:
            raise ValueError(f"unknown tie-break rule {self.tie_break!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricConfig":
        return cls(
            blocking=d.get("blocking", ()),
            numeric=d.get("numeric", {}),
            tie_break=d.get("tie_break", "person_id"),
        )

    def cells(self, frame: Frame) -> tuple[np.ndarray, np.ndarray]:
        """Cell index per row and the table of distinct blocking values."""
        if not self.blocking:
            return np.zeros(frame.n, dtype=np.int64), np.zeros((1, 0))
        keys = np.stack([np.asarray(frame.column(b)) for b in self.blocking], axis=1)
        table, idx = np.unique(keys, axis=0, return_inverse=True)
        return idx.ravel().astype(np.int64), table

    def coordinates(self, frame: Frame) -> np.ndarray:
        cols = [np.asarray(frame.column(k), dtype=np.float64) * s for k, s in self.numeric.items() if s > 0]
        if not cols:
            return np.zeros((frame.n, 0))
        return np.stack(cols, axis=1)


@dataclass
class DonorAssignment:
    """Donors for one income item.

    ``donors[r]`` lists the row indices of the ``m2`` variance donors of
    recipient row ``recipients[r]``, nearest first; the first ``m1`` are the
    point-estimation donors. ``w1``/``w2`` hold the point and variance
    fractional weights aligned with ``donors``. Respondents donate to
    themselves with weight one, which is implicit.
    """

    item: int
    recipients: np.ndarray
    donors: np.ndarray
    distances: np.ndarray
    m1: int
    m2: int
    w1: np.ndarray | None = None
    w2: np.ndarray | None = None

    @property
    def n_recipients(self) -> int:
        return self.recipients.shape[0]

    def donor_ids(self, frame: Frame) -> np.ndarray:
        return frame.person_id[self.donors]

    def point_matrix(self, n: int, respondent: np.ndarray) -> sparse.csr_matrix:
        """Sparse (n, n) matrix of point fractions, self-donation included.

        Row i, column j holds w*_1ij, so ``matrix @ w`` is the donor total
        weight vector and ``matrix @ W`` gives naive replicate donor weights.
        """
        return self._matrix(n, respondent, self.w1)

    def variance_matrix(self, n: int, respondent: np.ndarray) -> sparse.csr_matrix:
        return self._matrix(n, respondent, self.w2)

    def _matrix(self, n, respondent, frac):
        if frac is None:
            raise ValueError("fractional weights not assigned")
        self_rows = np.flatnonzero(respondent)
        m2 = self.donors.shape[1]
        rows = np.concatenate([self_rows, self.donors.ravel()])
        cols = np.concatenate([self_rows, np.repeat(self.recipients, m2)])
        vals = np.concatenate([np.ones(self_rows.shape[0]), frac.ravel()])
        keep = vals != 0
        return sparse.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n))


class DonorIndex:
    """Read-only donor search structure for one income item.

    Respondents are grouped by blocking cell; within a cell, respondents with
    identical coordinates are collapsed to one tree point that remembers its
    first ``m2`` person rows in id order.
    """

    def __init__(self, frame: Frame, item: int, metric: MetricConfig, m2: int):
        self.frame, self.item, self.metric, self.m2 = frame, item, metric, m2
        self.cell, self.cell_values = metric.cells(frame)
        self.coords = metric.coordinates(frame)
        resp = frame.response[:, item]
        self._cells: dict[int, _CellIndex] = {}
        rows = np.flatnonzero(resp)
        order = np.lexsort((rows, self.cell[rows]))
        rows = rows[order]
        cells = self.cell[rows]
        bounds = np.flatnonzero(np.diff(cells)) + 1
        for chunk in np.split(rows, bounds):
            if chunk.size:
                self._cells[int(self.cell[chunk[0]])] = _CellIndex(chunk, self.coords[chunk], m2)

    def cell_label(self, c: int) -> tuple:
        if not self.metric.blocking:
            return ()
        return tuple(v.item() for v in self.cell_values[c])

    def query(self, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Donor rows and distances, shape (len(rows), m2), nearest first."""
        rows = np.asarray(rows, dtype=np.int64)
        donors = np.empty((rows.shape[0], self.m2), dtype=np.int64)
        dists = np.empty((rows.shape[0], self.m2))
        cells = self.cell[rows]
        for c in np.unique(cells):
            sel = np.flatnonzero(cells == c)
            ci = self._cells.get(int(c))
            have = 0 if ci is None else ci.rows.shape[0]
            if have < self.m2:
                raise ThinNeighborhoodError(self.item, self.cell_label(int(c)), have, self.m2)
            donors[sel], dists[sel] = ci.query(self.coords[rows[sel]])
        return donors, dists


class _CellIndex:
    def __init__(self, rows: np.ndarray, coords: np.ndarray, m2: int):
        self.rows = rows
        self.m2 = m2
        self.dim = coords.shape[1]
        if self.dim == 0:
            self.first = rows[:m2]
            return
        uniq, inv = np.unique(coords, axis=0, return_inverse=True)
        inv = inv.ravel()
        order = np.lexsort((rows, inv))
        # first m2 rows (in id order) for every distinct point
        starts = np.searchsorted(inv[order], np.arange(uniq.shape[0]))
        counts = np.bincount(inv, minlength=uniq.shape[0])
        take = np.minimum(counts, m2)
        self.members = np.full((uniq.shape[0], m2), -1, dtype=np.int64)
        for c in range(m2):
            has = take > c
            self.members[has, c] = rows[order[starts[has] + c]]
        self.points = uniq
        self.tree = cKDTree(uniq)

    def _distance(self, q: np.ndarray, pts: np.ndarray) -> np.ndarray:
        return np.abs(pts - q[..., None, :]).sum(axis=-1)

    def query(self, q: np.ndarray):
        m2 = self.m2
        nq = q.shape[0]
        if self.dim == 0:
            return np.broadcast_to(self.first, (nq, m2)).copy(), np.zeros((nq, m2))
        n_pts = self.points.shape[0]
        k = min(m2 + 1, n_pts)
        _, idx = self.tree.query(q, k=k, p=1)
        idx = idx.reshape(nq, k)
        d = self._distance(q, self.points[idx])
        order = np.argsort(d, axis=1, kind="stable")
        idx = np.take_along_axis(idx, order, axis=1)
        d = np.take_along_axis(d, order, axis=1)
        cnt = (self.members[idx] >= 0).sum(axis=2)
        cum = np.cumsum(cnt, axis=1)
        pos = np.argmax(cum >= m2, axis=1)
        d_cut = d[np.arange(nq), pos]
        # exact when some returned point lies strictly beyond the cut or all points were returned
        safe = (d[:, -1] > d_cut * (1 + 1e-9) + 1e-12) | (k == n_pts)
        donors = np.empty((nq, m2), dtype=np.int64)
        dists = np.empty((nq, m2))
        if safe.any():
            s = np.flatnonzero(safe)
            cand = self.members[idx[s]].reshape(s.size, -1)
            cd = np.repeat(d[s], m2, axis=1)
            cd = np.where((cand >= 0) & (cd <= d_cut[s, None]), cd, np.inf)
            cand = np.where(np.isfinite(cd), cand, np.iinfo(np.int64).max)
            o = _rowwise_lexsort(cd, cand)
            donors[s] = np.take_along_axis(cand, o, axis=1)[:, :m2]
            dists[s] = np.take_along_axis(cd, o, axis=1)[:, :m2]
        for r in np.flatnonzero(~safe):
            hit = self.tree.query_ball_point(q[r], r=d_cut[r] * (1 + 1e-9) + 1e-12, p=1)
            hit = np.asarray(hit, dtype=np.int64)
            hd = self._distance(q[r], self.points[hit])
            mem = self.members[hit]
            cand = mem.ravel()
            cd = np.repeat(hd, m2)
            ok = cand >= 0
            cand, cd = cand[ok], cd[ok]
            o = np.lexsort((cand, cd))[:m2]
            donors[r], dists[r] = cand[o], cd[o]
        return donors, dists


def _rowwise_lexsort(primary: np.ndarray, secondary: np.ndarray) -> np.ndarray:
    """Per-row argsort by (primary, secondary)."""
    o = np.argsort(secondary, axis=1, kind="stable")
    p = np.take_along_axis(primary, o, axis=1)
    o2 = np.argsort(p, axis=1, kind="stable")
    return np.take_along_axis(o, o2, axis=1)


def find_donors(
    frame: Frame,
    recipient: int,
    item: int,
    m2: int,
    metric: MetricConfig,
    index: DonorIndex | None = None,
) -> list[int]:
    """Person ids of the ``m2`` nearest item respondents to one recipient.

    ``recipient`` is a ``person_id``. Raises :class:`ThinNeighborhoodError`
    when the recipient's blocking cell cannot supply ``m2`` donors.
    """
    row = int(np.searchsorted(frame.person_id, recipient))
    if row >= frame.n or frame.person_id[row] != recipient:
        raise KeyError(f"no person {recipient}")
    index = index or DonorIndex(frame, item, metric, m2)
    donors, _ = index.query(np.array([row]))
    return [int(p) for p in frame.person_id[donors[0]]]


def assign_fractional_weights(assignment: DonorAssignment, m1: int, m2: int) -> DonorAssignment:
    """Equal fractions over the first ``m1`` (point) and all ``m2`` (variance) donors."""
    if not 1 <= m1 <= m2:
        raise ValueError("need 1 <= M1 <= M2")
    if assignment.donors.shape[1] < m2:
        raise ValueError("assignment holds fewer than M2 donors per recipient")
    m = assignment.n_recipients
    donors = assignment.donors[:, :m2]
    w1 = np.zeros((m, m2))
    w1[:, :m1] = 1.0 / m1
    w2 = np.full((m, m2), 1.0 / m2)
    return replace(assignment, donors=donors, distances=assignment.distances[:, :m2], m1=m1, m2=m2, w1=w1, w2=w2)


def impute_item(frame: Frame, item: int, metric: MetricConfig, m1: int = 1, m2: int = 2) -> DonorAssignment:
    recipients = np.flatnonzero(~frame.response[:, item])
    index = DonorIndex(frame, item, metric, m2)
    if recipients.size:
        donors, dists = index.query(recipients)
    else:
        donors, dists = np.zeros((0, m2), dtype=np.int64), np.zeros((0, m2))
    a = DonorAssignment(item, recipients, donors, dists, m1, m2)
    return assign_fractional_weights(a, m1, m2)


def impute(
    frame: Frame,
    metric: MetricConfig,
    m1: int = 1,
    m2: int = 2,
    items: Sequence[int] | None = None,
    threads: int = 1,
) -> list[DonorAssignment]:
    """Donor assignments for every income item (independent per item)."""
    items = range(frame.n_items) if items is None else items
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(lambda s: impute_item(frame, s, metric, m1, m2), items))
    return [impute_item(frame, s, metric, m1, m2) for s in items]


def imputed_values(frame: Frame, assignment: DonorAssignment, which: str = "point", y=None) -> np.ndarray:
    """Item values with recipients replaced by their fractional mean imputation."""
    y = frame.income[:, assignment.item] if y is None else np.asarray(y, dtype=float)
    frac = assignment.w1 if which == "point" else assignment.w2
    out = np.where(frame.response[:, assignment.item], y, np.nan)
    out[assignment.recipients] = (frac * y[assignment.donors]).sum(axis=1)
    return out


def imputed_linear_estimate(frame: Frame, assignment: DonorAssignment, weights=None, which: str = "point", y=None):
    """Imputed linear estimator for one item.

    Returns
    -------
    theta : float
        Recipient-side form, sum_j w_j y_Ij.
    alpha : ndarray
        Donor total weights (zero for nonrespondents); sum_i alpha_i y_i
        reproduces ``theta``.
    y_imp : ndarray
        Observed values for respondents, fractional means for recipients.
    """
    w = frame.w if weights is None else np.asarray(weights, dtype=float)
    y = frame.income[:, assignment.item] if y is None else np.asarray(y, dtype=float)
    resp = frame.response[:, assignment.item]
    mat = assignment.point_matrix(frame.n, resp) if which == "point" else assignment.variance_matrix(frame.n, resp)
    alpha = mat @ w
    y_imp = imputed_values(frame, assignment, which, y)
    theta = float(w @ y_imp)
    return theta, alpha, y_imp
