"""Iterative proportional fitting of full-sample and replicate weights."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import sparse

from .core import Frame, IngestionError
from .replicate import ReplicateWeightSet


class RakingInfeasibleError(ValueError):
    """A category with a positive control has no sampled weight."""


@dataclass
class RakingDimension:
    """One raking variable: person codes into ``labels`` and their controls."""

    name: str
    labels: list
    codes: np.ndarray
    controls: np.ndarray

    @property
    def n_categories(self) -> int:
        return len(self.labels)

    def indicator(self) -> sparse.csr_matrix:
        n = self.codes.shape[0]
        return sparse.csr_matrix((np.ones(n), (self.codes, np.arange(n))), shape=(self.n_categories, n))


@dataclass
class ControlMargins:
    """Control totals by dimension, keyed by category (or by (area, category)).

    When areas are given each category is crossed with the area, so one
    pass rakes every weighting area to its own controls.
    """

    controls: dict[str, dict]
    by_area: bool = False

    def __post_init__(self):
        if not self.controls:
            raise ValueError("at least one raking dimension is required")
        for dim, ctl in self.controls.items():
            for key, v in ctl.items():
                if not v > 0:
                    raise ValueError(f"control for {dim}={key} must be positive, got {v}")

    @property
    def dimensions(self) -> list[str]:
        return list(self.controls)

    def bind(self, frame: Frame) -> list[RakingDimension]:
        """Map every person to one category per dimension."""
        area = frame.area_id
        dims = []
        for name, ctl in self.controls.items():
            values = np.asarray(frame.column(name))
            keys = list(zip(area.tolist(), values.tolist())) if self.by_area else values.tolist()
            labels = sorted(ctl, key=str)
            pos = {k: i for i, k in enumerate(labels)}
            codes = np.fromiter((pos.get(k, -1) for k in keys), dtype=np.int64, count=len(keys))
            if (codes < 0).any():
                bad = int(np.flatnonzero(codes < 0)[0])
                raise RakingInfeasibleError(
                    f"person {frame.person_id[bad]} has {name}={keys[bad]!r} with no control"
                )
            dims.append(RakingDimension(name, labels, codes, np.array([ctl[k] for k in labels], dtype=np.float64)))
        return dims

    @classmethod
    def from_csv(cls, path) -> "ControlMargins":
        """Read ``dimension, category, control`` rows (plus optional ``area``)."""
        try:
            df = pd.read_csv(path)
        except FileNotFoundError as exc:
            raise IngestionError(f"margins file not found: {path}") from exc
        missing = {"dimension", "category", "control"} - set(df.columns)
        if missing:
            raise IngestionError(f"{path}: missing columns {sorted(missing)}")
        by_area = "area" in df.columns
        controls: dict[str, dict] = {}
        for row in df.itertuples(index=False):
            cat = _parse_label(row.category)
            key = (int(row.area), cat) if by_area else cat
            d = controls.setdefault(str(row.dimension), {})
            if key in d:
                raise IngestionError(f"{path}: duplicate control {row.dimension}={key}")
            d[key] = float(row.control)
        return cls(controls, by_area)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["dimension", "category", "control"] + (["area"] if self.by_area else []))
            for dim, ctl in self.controls.items():
                for key in sorted(ctl, key=str):
                    if self.by_area:
                        wr.writerow([dim, key[1], repr(ctl[key]), key[0]])
                    else:
                        wr.writerow([dim, key, repr(ctl[key])])


def _parse_label(x):
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)) and float(x).is_integer():
        return int(x)
    try:
        return int(str(x))
    except ValueError:
        return str(x)


@dataclass
class RakingConfig:
    tolerance: float = 1e-8
    max_iterations: int = 500
    chunk: int = 10

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "RakingConfig":
        return cls(**dict(d or {}))


@dataclass
class RakingReport:
    iterations: int
    converged: bool
    max_error: float
    worst: tuple = ()


@dataclass
class RakingResult:
    weights: np.ndarray
    report: RakingReport


def _margin_errors(dims, totals):
    """Max relative error and where it sits."""
    worst, where = 0.0, ()
    for d, t in zip(dims, totals):
        err = np.abs(t - d.controls[:, None]) / d.controls[:, None]
        j = np.unravel_index(np.argmax(err), err.shape)
        if err[j] > worst:
            worst, where = float(err[j]), (d.name, d.labels[j[0]])
    return worst, where


def _rake_block(W: np.ndarray, dims: Sequence[RakingDimension], ind, cfg: RakingConfig, col0: int = 0):
    """Rake the columns of W in place; returns one report per column."""
    L = W.shape[1]
    reports: list[RakingReport | None] = [None] * L
    active = np.arange(L)

    def errors(cols):
        err = np.zeros(cols.shape[0])
        for d, S in zip(dims, ind):
            t = S @ W[:, cols]
            err = np.maximum(err, (np.abs(t - d.controls[:, None]) / d.controls[:, None]).max(axis=0))
        return err

    for d, S in zip(dims, ind):
        t = S @ W
        empty = (t <= 0).any(axis=1)
        if empty.any():
            j = int(np.flatnonzero(empty)[0])
            cols = np.flatnonzero(t[j] <= 0)
            raise RakingInfeasibleError(
                f"{d.name}={d.labels[j]!r} has positive control but no sampled weight"
                + (f" (replicate {col0 + int(cols[0])})" if L > 1 or col0 else "")
            )
    it = 0
    err = errors(active)
    while True:
        done = err <= cfg.tolerance
        for j, e in zip(active[done], err[done]):
            reports[j] = RakingReport(it, True, float(e))
        active, err = active[~done], err[~done]
        if active.size == 0 or it >= cfg.max_iterations:
            break
        for d, S in zip(dims, ind):
            t = S @ W[:, active]
            W[:, active] *= (d.controls[:, None] / t)[d.codes]
        it += 1
        err = errors(active)
    for j, e in zip(active, err):
        totals = [S @ W[:, [j]] for S in ind]
        reports[j] = RakingReport(it, False, float(e), _margin_errors(dims, totals)[1])
    return reports


def rake(weights, margins: ControlMargins | Sequence[RakingDimension], config: RakingConfig | None = None, frame: Frame | None = None) -> RakingResult:
    """Cyclic raking of one weight vector to all margins.

    ``margins`` is either dimensions already bound to persons or a
    :class:`ControlMargins` together with the ``frame`` that supplies the
    category of every person. Non-convergence is reported, not raised.
    """
    cfg = config or RakingConfig()
    dims = margins.bind(frame) if isinstance(margins, ControlMargins) else list(margins)
    w = np.array(weights, dtype=np.float64)
    if (w < 0).any():
        raise ValueError("weights must be nonnegative")
    ind = [d.indicator() for d in dims]
    W = w[:, None]
    rep = _rake_block(W, dims, ind, cfg)[0]
    return RakingResult(W[:, 0], rep)


@dataclass
class ReplicateRakingResult:
    reps: ReplicateWeightSet
    reports: list[RakingReport] = field(repr=False)

    @property
    def converged(self) -> bool:
        return all(r.converged for r in self.reports)


def rake_replicates(
    reps: ReplicateWeightSet,
    margins: ControlMargins | Sequence[RakingDimension],
    config: RakingConfig | None = None,
    frame: Frame | None = None,
    in_place: bool = False,
) -> ReplicateRakingResult:
    """Rake every replicate column independently to the same controls."""
    cfg = config or RakingConfig()
    if reps.weights is None:
        raise ValueError("replicate set carries no weights")
    dims = margins.bind(frame) if isinstance(margins, ControlMargins) else list(margins)
    ind = [d.indicator() for d in dims]
    W = reps.weights if in_place else reps.weights.copy()
    L = W.shape[1]
    reports = []
    for s in range(0, L, cfg.chunk):
        block = W[:, s : s + cfg.chunk]
        reports.extend(_rake_block(block, dims, ind, cfg, s))
        W[:, s : s + cfg.chunk] = block
    out = ReplicateWeightSet(reps.c, reps.psu, W, reps.groups, reps.delta, raked=True)
    return ReplicateRakingResult(out, reports)


def write_convergence_report(path, reports: Sequence[RakingReport], labels: Sequence[str] | None = None):
    labels = labels or (["full"] if len(reports) == 1 else [str(k) for k in range(len(reports))])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["weights", "iterations", "converged", "max_error", "worst_margin"])
        for lab, r in zip(labels, reports):
            wr.writerow([lab, r.iterations, int(r.converged), f"{r.max_error:.3e}", "=".join(map(str, r.worst))])


def control_total_variance(reps: ReplicateWeightSet, dims: Sequence[RakingDimension], weights: np.ndarray) -> list[np.ndarray]:
    """Jackknife variance of every control-total estimator, per dimension."""
    out = []
    for d in dims:
        S = d.indicator()
        full = S @ weights
        rep = S @ reps.weights
        out.append(((rep - full[:, None]) ** 2) @ reps.c)
    return out
