"""Replicated incomes, poverty counts, domain totals and the median.

Every estimator is returned with two replicate series: *naive* (point
fractions kept in every replicate, imputed values treated as observed) and
*adjusted* (replicate fractions from the adjustment step).
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

from .core import Frame, PovertyThresholdTable, Units, family_threshold_keys, group_units
from .impute import DonorAssignment
from .replicate import (
    ReplicateFractionalWeights,
    ReplicateWeightSet,
    _rowdot_pairs,
    adjust_item,
    jackknife_variance,
)


@dataclass
class ReplicationResult:
    """Everything the estimators need: frame, donors, replicate weights and fractions."""

    frame: Frame
    assignments: list[DonorAssignment]
    replications: list[ReplicateFractionalWeights]
    reps: ReplicateWeightSet
    weights: np.ndarray

    @property
    def c(self) -> np.ndarray:
        return self.reps.c

    @property
    def W(self) -> np.ndarray:
        return self.reps.weights

    @property
    def n_replicates(self) -> int:
        return self.reps.n_replicates


def replicate_imputation(
    frame: Frame,
    assignments: Sequence[DonorAssignment],
    reps: ReplicateWeightSet,
    mode: str | None = None,
    weights: np.ndarray | None = None,
    threads: int = 1,
) -> ReplicationResult:
    """Adjust replicate fractions for every item (items are independent)."""
    w = frame.w if weights is None else np.asarray(weights, dtype=np.float64)

    def one(a):
        m = mode or ("individual" if a.m1 == 1 else "grouped")
        return adjust_item(frame, a, reps, m, w)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            reps_list = list(ex.map(one, assignments))
    else:
        reps_list = [one(a) for a in assignments]
    return ReplicationResult(frame, list(assignments), reps_list, reps, w)


# -- replicated incomes -------------------------------------------------------


@dataclass
class ReplicateIncome:
    """Person and unit totals from the first and second donor, plus replicate k."""

    person: np.ndarray
    person_a: np.ndarray
    person_b: np.ndarray
    unit_a: np.ndarray
    unit_b: np.ndarray
    unit_k: np.ndarray | None = None
    replicate: int | None = None


def _second_donor_check(result: ReplicationResult):
    for a in result.assignments:
        if a.m1 != 1 or a.m2 != 2:
            raise ValueError("first/second donor incomes need M1 = 1 and M2 = 2")


def donor_totals(result: ReplicationResult) -> tuple[np.ndarray, np.ndarray]:
    """Person total income using the first donor (a) and the second donor (b)."""
    _second_donor_check(result)
    f = result.frame
    obs = np.where(f.response, f.income, 0.0)
    ta = obs.sum(axis=1)
    tb = ta.copy()
    for a in result.assignments:
        y = f.income[:, a.item]
        np.add.at(ta, a.recipients, y[a.donors[:, 0]])
        np.add.at(tb, a.recipients, y[a.donors[:, 1]])
    return ta, tb


def income_changes(result: ReplicationResult):
    """Replicate changes of person total income, summed over items.

    Returns (row, replicate, delta) triples with unique (row, replicate).
    """
    f = result.frame
    rows, ks, ds = [], [], []
    for rf in result.replications:
        r, k, d = rf.value_changes(f.income[:, rf.item])
        rows.append(r)
        ks.append(k)
        ds.append(d)
    if not rows:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    return _sum_pairs(np.concatenate(rows), np.concatenate(ks), np.concatenate(ds))


def _sum_pairs(a, b, v):
    if a.size == 0:
        return a.astype(np.int64), b.astype(np.int64), v
    key, inv = np.unique(np.stack([a, b], axis=1), axis=0, return_inverse=True)
    return key[:, 0], key[:, 1], np.bincount(inv.ravel(), weights=v, minlength=key.shape[0])


def replicate_incomes(result: ReplicationResult, k: int | None = None, key: str = "family_id") -> ReplicateIncome:
    """Person and family (or household) incomes; replicate k when given.

    Family totals sum member totals; the replicate-k family total adds the
    replicate-k changes of imputed items of its members.
    """
    units = group_units(result.frame, key)
    ta, tb = donor_totals(result)
    out = ReplicateIncome(person=ta, person_a=ta, person_b=tb, unit_a=units.total(ta), unit_b=units.total(tb))
    if k is not None:
        rows, ks, d = income_changes(result)
        sel = ks == k
        out.unit_k = out.unit_a + np.bincount(units.index[rows[sel]], weights=d[sel], minlength=units.n_units)
        out.replicate = k
    return out


def family_alpha(tinc_k, tinc_a, tinc_b) -> np.ndarray:
    """Weight alpha with tinc_k = alpha * tinc_a + (1 - alpha) * tinc_b; 1 when tinc_a == tinc_b."""
    tinc_k, tinc_a, tinc_b = np.broadcast_arrays(*(np.asarray(x, dtype=np.float64) for x in (tinc_k, tinc_a, tinc_b)))
    same = tinc_a == tinc_b
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = (tinc_k - tinc_b) / np.where(same, 1.0, tinc_a - tinc_b)
    return np.where(same, 1.0, alpha)


def _unit_changes(result: ReplicationResult, units: Units):
    """(unit, replicate, delta) of unit total income across replicates."""
    rows, ks, d = income_changes(result)
    return _sum_pairs(units.index[rows], ks, d)


def _replicated_indicator(result, units, member_weights, ind_a, ind_b, unit_a, unit_b):
    """Naive and adjusted replicate totals of a unit-level indicator.

    ``member_weights`` is a sparse (units x persons) matrix whose row u
    carries the persons whose replicate weights count for unit u.
    """
    W = result.W
    base = member_weights.T @ ind_a
    naive = W.T @ base
    t, k, d = _unit_changes(result, units)
    alpha = family_alpha(unit_a[t] + d, unit_a[t], unit_b[t])
    ind_k = alpha * ind_a[t] + (1 - alpha) * ind_b[t]
    wt = _rowdot_pairs(member_weights.tocsr(), W, t, k)
    adj = naive + np.bincount(k, weights=wt * (ind_k - ind_a[t]), minlength=naive.shape[0])
    return naive, adj, (t, k, alpha, ind_k)


# -- reports ------------------------------------------------------------------


@dataclass
class EstimateReport:
    """Point estimate with naive and imputation-aware standard errors."""

    parameter: str
    estimate: float
    naive_variance: float
    imputation_variance: float
    naive_replicates: np.ndarray = field(repr=False, default=None)
    adjusted_replicates: np.ndarray = field(repr=False, default=None)

    @property
    def naive_se(self) -> float:
        return float(np.sqrt(self.naive_variance))

    @property
    def imputation_se(self) -> float:
        return float(np.sqrt(self.imputation_variance))

    @property
    def std_se(self) -> float:
        """100 x imputation SE / naive SE (unrounded)."""
        if self.naive_se == 0:
            return 100.0 if self.imputation_se == 0 else float("inf")
        return 100.0 * self.imputation_se / self.naive_se


def standardized_se(naive_se: float, imputation_se: float) -> int:
    """Standardized SE as printed in reports: 100 x ratio, rounded half up."""
    if naive_se == 0:
        if imputation_se == 0:
            return 100
        raise ZeroDivisionError("naive SE is zero")
    return int(np.floor(100.0 * imputation_se / naive_se + 0.5))


REPORT_COLUMNS = ("parameter", "estimate", "naive_se", "imputation_se", "std_se")


def _report_rows(reports):
    for r in reports:
        try:
            std = standardized_se(r.naive_se, r.imputation_se)
        except ZeroDivisionError:
            std = ""
        yield [r.parameter, f"{r.estimate:.6f}", f"{r.naive_se:.6f}", f"{r.imputation_se:.6f}", std]


def format_report(reports: Sequence[EstimateReport], fmt: str = "csv") -> str:
    """Render reports as CSV or as a fixed-width table."""
    if not reports:
        raise ValueError("no reports to emit")
    rows = list(_report_rows(reports))
    if fmt == "csv":
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(REPORT_COLUMNS)
        wr.writerows(rows)
        return buf.getvalue()
    if fmt == "text":
        header = ["Parameter", "Estimate", "Naive SE", "Imputation SE", "Std. SE"]
        cells = [header] + [[str(x) for x in r] for r in rows]
        widths = [max(len(c[i]) for c in cells) for i in range(len(header))]
        lines = ["  ".join(c[i].ljust(widths[i]) if i == 0 else c[i].rjust(widths[i]) for i in range(len(c))) for c in cells]
        lines.insert(1, "-" * len(lines[0]))
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def emit_report(reports: Sequence[EstimateReport], path, fmt: str = "csv") -> str:
    text = format_report(reports, fmt)
    with open(path, "w") as fh:
        fh.write(text)
    return text


# -- linear totals ----------------------------------------------------------------


def linear_total(result: ReplicationResult, item: int | None = None, z=None, name: str = "total") -> EstimateReport:
    """Imputed total of one item (or of total income when ``item`` is None).

    Replicates are centered at the full-sample imputed estimate.
    """
    f, W = result.frame, result.W
    z = None if z is None else np.asarray(z, dtype=np.float64)
    theta, naive, adj = 0.0, np.zeros(result.n_replicates), np.zeros(result.n_replicates)
    touched = set()
    for rf in result.replications:
        if item is not None and rf.item != item:
            continue
        th, nv, ad = rf.replicate_totals(f.income[:, rf.item], result.weights, W, z)
        theta, naive, adj = theta + th, naive + nv, adj + ad
        touched.add(rf.item)
    items = range(f.n_items) if item is None else [item]
    for s in items:
        if s in touched:
            continue
        y = np.where(f.response[:, s], f.income[:, s], 0.0)
        if not f.response[:, s].all():
            raise ValueError(f"item {s + 1} has missing values but no replication")
        yz = y if z is None else y * z
        theta += float(result.weights @ yz)
        naive += W.T @ yz
        adj += W.T @ yz
    c = result.c
    return EstimateReport(
        name, theta,
        jackknife_variance(naive, theta, c), jackknife_variance(adj, theta, c),
        naive, adj,
    )


def domain_totals(result: ReplicationResult, domain: np.ndarray | None = None, item: int | None = None,
                  prefix: str = "total", by: str = "county_id") -> list[EstimateReport]:
    """One linear total per domain value, named ``prefix[by=value]``."""
    domain = result.frame.county_id if domain is None else np.asarray(domain)
    return [
        linear_total(result, item, (domain == d).astype(float), f"{prefix}[{by}={d}]")
        for d in np.unique(domain)
    ]


# -- poverty ----------------------------------------------------------------------


@dataclass
class PovertyEstimate:
    zeta: np.ndarray
    pov_a: np.ndarray
    pov_b: np.ndarray
    threshold: np.ndarray
    report: EstimateReport

    @property
    def estimate(self) -> float:
        return self.report.estimate


def poverty_count_variance(
    result: ReplicationResult,
    thresholds: PovertyThresholdTable,
    z=None,
    name: str = "poverty",
) -> PovertyEstimate:
    """Weighted count of persons in poverty with naive and adjusted variances.

    A family is poor when its total income (first donor) is strictly below
    its threshold; all members share the status. ``z`` selects persons (for
    age groups). Replicates are centered at their mean.
    """
    f = result.frame
    fam = group_units(f, "family_id")
    ch, sz, ac = family_threshold_keys(f, fam)
    c_t = thresholds.lookup(ch, sz, ac)
    if np.isnan(c_t).any():
        u = int(np.flatnonzero(np.isnan(c_t))[0])
        raise KeyError(f"family {fam.ids[u]} has no poverty threshold for key {(int(ch[u]), int(sz[u]), int(ac[u]))}")
    ta, tb = donor_totals(result)
    fa, fb = fam.total(ta), fam.total(tb)
    pov_a = (fa < c_t).astype(np.float64)
    pov_b = (fb < c_t).astype(np.float64)
    z = np.ones(f.n) if z is None else np.asarray(z, dtype=np.float64)
    members = sparse.csr_matrix((z, (fam.index, np.arange(f.n))), shape=(fam.n_units, f.n))
    theta = float(result.weights @ (z * pov_a[fam.index]))
    naive, adj, _ = _replicated_indicator(result, fam, members, pov_a, pov_b, fa, fb)
    c = result.c
    rep = EstimateReport(name, theta, jackknife_variance(naive, c=c, center="mean"),
                         jackknife_variance(adj, c=c, center="mean"), naive, adj)
    return PovertyEstimate(pov_a.copy(), pov_a, pov_b, c_t, rep)


# -- median -----------------------------------------------------------------------


class WeightedCDF:
    """Right-continuous weighted empirical distribution function."""

    def __init__(self, values, weights):
        values = np.asarray(values, dtype=np.float64)
        weights = np.asarray(weights, dtype=np.float64)
        total = weights.sum()
        if not total > 0:
            raise ValueError("total weight must be positive")
        order = np.argsort(values, kind="stable")
        self.values = values[order]
        self.cum = np.cumsum(weights[order]) / total
        self.cum[-1] = 1.0

    def __call__(self, u):
        pos = np.searchsorted(self.values, np.asarray(u, dtype=np.float64), side="right")
        return np.where(pos > 0, self.cum[np.maximum(pos - 1, 0)], 0.0)

    def quantile(self, p) -> np.ndarray:
        """Smallest observed value u with F(u) >= p (clamped to the data range)."""
        p = np.asarray(p, dtype=np.float64)
        pos = np.searchsorted(self.cum, p - 1e-12, side="left")
        return self.values[np.clip(pos, 0, self.values.shape[0] - 1)]


@dataclass
class MedianEstimate:
    median: float
    cdf: WeightedCDF
    inv_a: np.ndarray
    inv_b: np.ndarray
    naive: tuple
    adjusted: tuple
    report: EstimateReport

    @property
    def v_inv(self) -> float:
        return self.adjusted[0]

    @property
    def p_interval(self) -> tuple[float, float]:
        return self.adjusted[1]

    @property
    def v_med(self) -> float:
        return self.adjusted[2]


def woodruff_variance(cdf: WeightedCDF, v_inv: float) -> tuple[tuple[float, float], float]:
    """(p1, p2) = 0.5 -/+ 2 sqrt(v_inv) and {F^-1(p2) - F^-1(p1)}^2 / 16."""
    half = 2.0 * np.sqrt(max(v_inv, 0.0))
    p1, p2 = 0.5 - half, 0.5 + half
    lo, hi = cdf.quantile([p1, p2])
    return (p1, p2), float((hi - lo) ** 2 / 16.0)


def median_variance(result: ReplicationResult, name: str = "median") -> MedianEstimate:
    """Median household income with test-inversion variances.

    Households are weighted by their householder's weight; the replicated
    indicator of income below the median gives the variance of the
    estimated proportion, which is mapped back through the estimated CDF.
    """
    f = result.frame
    hh = group_units(f, "household_id")
    ta, tb = donor_totals(result)
    ha, hb = hh.total(ta), hh.total(tb)
    w_hh = result.weights[hh.head]
    if not w_hh.sum() > 0:
        raise ValueError("zero total householder weight")
    cdf = WeightedCDF(ha, w_hh)
    med = float(cdf.quantile(0.5))
    inv_a = (ha < med).astype(np.float64)
    inv_b = (hb < med).astype(np.float64)
    heads = sparse.csr_matrix((np.ones(hh.n_units), (np.arange(hh.n_units), hh.head)), shape=(hh.n_units, f.n))
    naive_num, adj_num, _ = _replicated_indicator(result, hh, heads, inv_a, inv_b, ha, hb)
    den = result.W[hh.head].sum(axis=0)
    c = result.c
    out = []
    for num in (naive_num, adj_num):
        p_k = num / den
        v_inv = jackknife_variance(p_k, c=c, center="mean")
        interval, v_med = woodruff_variance(cdf, v_inv)
        out.append((v_inv, interval, v_med, p_k))
    rep = EstimateReport(name, med, out[0][2], out[1][2])
    return MedianEstimate(med, cdf, inv_a, inv_b, out[0], out[1], rep)
