"""Microdata model: persons, families, households, design labels, thresholds.

The in-memory representation is columnar (:class:`Frame`); :class:`PersonRecord`
is the row view used for construction, CSV round trips and small tests.
Rows of a frame are always sorted by ``person_id`` so that row order doubles
as the deterministic tie-break order used by the donor search.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

#: Number of income items on the long form (wage, self employment, interest,
#: social security, SSI, public assistance, retirement, other).
N_ITEMS = 8

#: Householder age at or above which the "elderly" threshold column applies.
ELDERLY_AGE = 65

_BASE_COLUMNS = (
    "person_id",
    "family_id",
    "household_id",
    "is_householder",
    "age",
    "stratum_id",
    "county_id",
    "w0",
    "w",
)


class IngestionError(Exception):
    """Input could not be read or does not have the documented layout."""


@dataclass
class PersonRecord:
    """One sampled person.

    ``income[s]`` is ignored when ``response[s]`` is false; unobserved items
    are carried as ``None`` and become NaN in a :class:`Frame`.
    """

    person_id: int
    family_id: int
    household_id: int
    is_householder: bool
    age: int
    income: Sequence[float | None]
    response: Sequence[bool]
    stratum_id: int = 0
    county_id: int = 0
    initial_weight: float = 1.0
    final_weight: float = 1.0
    covariates: Mapping[str, float] = field(default_factory=dict)
    area_id: int = 0


@dataclass
class SampleDesign:
    """Sampling design labels and the grouped-jackknife layout.

    Parameters
    ----------
    variance_strata : int
        Number of variance strata H formed within each weighting area.
    groups_per_stratum : int
        Number of jackknife groups G per variance stratum.
    strata : sequence of int, optional
        Admissible design stratum ids. ``None`` accepts any.
    domains : sequence of int, optional
        Admissible county (domain) ids. ``None`` accepts any.
    """

    variance_strata: int = 50
    groups_per_stratum: int = 2
    strata: Sequence[int] | None = None
    domains: Sequence[int] | None = None

    def __post_init__(self):
        if self.variance_strata < 1 or self.groups_per_stratum < 2:
            raise ValueError("need H >= 1 variance strata and G >= 2 groups")

    @property
    def n_replicates(self) -> int:
        return self.variance_strata * self.groups_per_stratum


class PovertyThresholdTable:
    """Poverty thresholds keyed by (related children < 18, family size, age class).

    ``age_class`` is 1 when the family reference person is at least
    :data:`ELDERLY_AGE` years old and 0 otherwise.
    """

    def __init__(self, thresholds: Mapping[tuple[int, int, int], float]):
        self._table = {tuple(int(v) for v in k): float(c) for k, c in thresholds.items()}
        bad = [k for k, c in self._table.items() if not c > 0]
        if bad:
            raise ValueError(f"nonpositive thresholds for keys {bad[:5]}")

    def __len__(self):
        return len(self._table)

    def __contains__(self, key):
        return tuple(int(v) for v in key) in self._table

    def __getitem__(self, key) -> float:
        return self._table[tuple(int(v) for v in key)]

    def items(self):
        return self._table.items()

    def lookup(self, children, size, age_class) -> np.ndarray:
        """Vectorized lookup; unresolvable keys come back as NaN."""
        children = np.asarray(children, dtype=np.int64)
        size = np.asarray(size, dtype=np.int64)
        age_class = np.asarray(age_class, dtype=np.int64)
        out = np.full(children.shape, np.nan)
        if children.size == 0:
            return out
        keys = np.stack([children, size, age_class], axis=1)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        vals = np.array([self._table.get(tuple(int(x) for x in u), np.nan) for u in uniq])
        out[:] = vals[inv.ravel()]
        return out

    @classmethod
    def from_csv(cls, path) -> "PovertyThresholdTable":
        """Read a ``children,size,age_class,threshold`` CSV."""
        df = _read_csv(path, required=("children", "size", "age_class", "threshold"))
        table = {
            (int(r.children), int(r.size), int(r.age_class)): float(r.threshold)
            for r in df.itertuples(index=False)
        }
        return cls(table)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["children", "size", "age_class", "threshold"])
            for (ch, sz, ac), c in sorted(self._table.items()):
                wr.writerow([ch, sz, ac, repr(c)])


@dataclass
class Frame:
    """Columnar sample of persons, sorted by ``person_id``.

    ``income`` has shape (n, n_items) and holds NaN wherever ``response`` is
    false. Use :meth:`from_arrays` or :meth:`from_records` to build one; they
    sort rows and enforce the absent-value convention.
    """

    person_id: np.ndarray
    family_id: np.ndarray
    household_id: np.ndarray
    is_householder: np.ndarray
    age: np.ndarray
    stratum_id: np.ndarray
    county_id: np.ndarray
    area_id: np.ndarray
    w0: np.ndarray
    w: np.ndarray
    income: np.ndarray
    response: np.ndarray
    covariates: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.person_id.shape[0]

    @property
    def n_items(self) -> int:
        return self.income.shape[1]

    def __len__(self):
        return self.n

    @classmethod
    def from_arrays(
        cls,
        person_id,
        family_id,
        household_id,
        is_householder,
        age,
        income,
        response=None,
        stratum_id=None,
        county_id=None,
        area_id=None,
        w0=None,
        w=None,
        covariates: Mapping[str, Iterable] | None = None,
    ) -> "Frame":
        person_id = np.asarray(person_id, dtype=np.int64)
        n = person_id.shape[0]
        income = np.array(income, dtype=np.float64, ndmin=2)
        if income.shape[0] != n:
            income = income.reshape(n, -1)
        if response is None:
            response = ~np.isnan(income)
        response = np.array(response, dtype=bool, ndmin=2).reshape(income.shape)

        def col(x, dtype, default):
            if x is None:
                return np.full(n, default, dtype=dtype)
            x = np.asarray(x, dtype=dtype)
            if x.shape != (n,):
                raise ValueError(f"column has shape {x.shape}, expected ({n},)")
            return x

        order = np.argsort(person_id, kind="stable")
        covs = {k: np.asarray(v)[order] for k, v in (covariates or {}).items()}
        income = income[order].copy()
        response = response[order].copy()
        income[~response] = np.nan
        w0 = col(w0, np.float64, 1.0)
        return cls(
            person_id=person_id[order],
            family_id=col(family_id, np.int64, 0)[order],
            household_id=col(household_id, np.int64, 0)[order],
            is_householder=col(is_householder, bool, False)[order],
            age=col(age, np.int64, 0)[order],
            stratum_id=col(stratum_id, np.int64, 0)[order],
            county_id=col(county_id, np.int64, 0)[order],
            area_id=col(area_id, np.int64, 0)[order],
            w0=w0[order],
            w=(w0 if w is None else col(w, np.float64, 1.0))[order],
            income=income,
            response=response,
            covariates=covs,
        )

    @classmethod
    def from_records(cls, records: Sequence[PersonRecord]) -> "Frame":
        if not records:
            raise ValueError("empty record list")
        s = len(records[0].income)
        if any(len(r.income) != s or len(r.response) != s for r in records):
            raise ValueError("all records need the same number of income items")
        names = list(records[0].covariates)
        income = np.array(
            [[np.nan if v is None else v for v in r.income] for r in records], dtype=float
        )
        return cls.from_arrays(
            person_id=[r.person_id for r in records],
            family_id=[r.family_id for r in records],
            household_id=[r.household_id for r in records],
            is_householder=[r.is_householder for r in records],
            age=[r.age for r in records],
            income=income,
            response=[list(r.response) for r in records],
            stratum_id=[r.stratum_id for r in records],
            county_id=[r.county_id for r in records],
            area_id=[r.area_id for r in records],
            w0=[r.initial_weight for r in records],
            w=[r.final_weight for r in records],
            covariates={k: [r.covariates[k] for r in records] for k in names},
        )

    def to_records(self) -> list[PersonRecord]:
        out = []
        for i in range(self.n):
            out.append(
                PersonRecord(
                    person_id=int(self.person_id[i]),
                    family_id=int(self.family_id[i]),
                    household_id=int(self.household_id[i]),
                    is_householder=bool(self.is_householder[i]),
                    age=int(self.age[i]),
                    income=[
                        float(v) if r else None
                        for v, r in zip(self.income[i], self.response[i])
                    ],
                    response=[bool(r) for r in self.response[i]],
                    stratum_id=int(self.stratum_id[i]),
                    county_id=int(self.county_id[i]),
                    initial_weight=float(self.w0[i]),
                    final_weight=float(self.w[i]),
                    covariates={k: v[i].item() for k, v in self.covariates.items()},
                    area_id=int(self.area_id[i]),
                )
            )
        return out

    def column(self, name: str) -> np.ndarray:
        """Look up a named column: a built-in field or a covariate."""
        if name in self.covariates:
            return self.covariates[name]
        if name.startswith("cov_") and name[4:] in self.covariates:
            return self.covariates[name[4:]]
        if name in _BASE_COLUMNS or name == "area_id":
            return getattr(self, name)
        raise KeyError(f"unknown column {name!r}")

    def with_weights(self, w: np.ndarray) -> "Frame":
        """Copy of the frame with final weights replaced."""
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.n,):
            raise ValueError("weight vector has the wrong length")
        return Frame(**{**self.__dict__, "w": w})

    # -- CSV -------------------------------------------------------------

    @classmethod
    def from_csv(cls, path, n_items: int | None = None) -> "Frame":
        """Read the persons CSV.

        Header: person_id, family_id, household_id, is_householder, age,
        stratum_id, county_id, w0, w, optional area_id, cov_* columns,
        y1..yS and r1..rS.
        """
        df = _read_csv(path, required=_BASE_COLUMNS)
        ys = sorted((c for c in df.columns if c[:1] == "y" and c[1:].isdigit()), key=lambda c: int(c[1:]))
        if n_items is not None:
            ys = ys[:n_items]
        if not ys:
            raise IngestionError(f"{path}: no income columns y1..yS")
        rs = [f"r{c[1:]}" for c in ys]
        missing = [c for c in rs if c not in df.columns]
        if missing:
            raise IngestionError(f"{path}: missing response columns {missing}")
        try:
            resp = df[rs].to_numpy().astype(int).astype(bool)
            income = df[ys].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
        except (ValueError, TypeError) as exc:
            raise IngestionError(f"{path}: malformed income/response values") from exc
        covs = {c[4:]: df[c].to_numpy() for c in df.columns if c.startswith("cov_")}
        return cls.from_arrays(
            person_id=df["person_id"],
            family_id=df["family_id"],
            household_id=df["household_id"],
            is_householder=df["is_householder"].astype(int).astype(bool),
            age=df["age"],
            income=income,
            response=resp,
            stratum_id=df["stratum_id"],
            county_id=df["county_id"],
            area_id=df["area_id"] if "area_id" in df.columns else None,
            w0=df["w0"],
            w=df["w"],
            covariates=covs,
        )

    def to_csv(self, path):
        cols = {
            "person_id": self.person_id,
            "family_id": self.family_id,
            "household_id": self.household_id,
            "is_householder": self.is_householder.astype(int),
            "age": self.age,
            "stratum_id": self.stratum_id,
            "county_id": self.county_id,
            "area_id": self.area_id,
            "w0": self.w0,
            "w": self.w,
        }
        for k, v in self.covariates.items():
            cols[f"cov_{k}"] = v
        for s in range(self.n_items):
            cols[f"y{s + 1}"] = self.income[:, s]
        for s in range(self.n_items):
            cols[f"r{s + 1}"] = self.response[:, s].astype(int)
        pd.DataFrame(cols).to_csv(path, index=False, float_format="%.17g", na_rep="")


def _read_csv(path, required: Sequence[str]) -> pd.DataFrame:
    if not os.path.isfile(path):
        raise IngestionError(f"cannot read {path}: no such file")
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise IngestionError(f"{path}: missing columns {missing}")
    return df


# -- families and households ----------------------------------------------


@dataclass
class Units:
    """Grouping of persons into families or households.

    ``index[i]`` is the unit position of person i; ``ids`` are the unit ids in
    ascending order; ``head[u]`` is the row of the unit's reference person.
    """

    ids: np.ndarray
    index: np.ndarray
    size: np.ndarray
    head: np.ndarray

    @property
    def n_units(self) -> int:
        return self.ids.shape[0]

    def total(self, values: np.ndarray) -> np.ndarray:
        """Sum person-level values (1-D or 2-D, persons first) within units."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            return np.bincount(self.index, weights=values, minlength=self.n_units)
        out = np.zeros((self.n_units,) + values.shape[1:])
        np.add.at(out, self.index, values)
        return out


def group_units(frame: Frame, key: str = "family_id") -> Units:
    """Group persons by ``family_id`` or ``household_id``.

    The reference person is the householder when one belongs to the unit,
    otherwise the oldest member (lowest ``person_id`` on ties).
    """
    ids, index = np.unique(getattr(frame, key), return_inverse=True)
    index = index.ravel()
    size = np.bincount(index, minlength=ids.shape[0])
    # sort so the preferred reference person of each unit comes first
    order = np.lexsort((frame.person_id, -frame.age, ~frame.is_householder, index))
    first = np.ones(order.shape[0], dtype=bool)
    first[1:] = index[order[1:]] != index[order[:-1]]
    head = np.empty(ids.shape[0], dtype=np.int64)
    head[index[order[first]]] = order[first]
    return Units(ids=ids, index=index, size=size, head=head)


def family_threshold_keys(frame: Frame, families: Units | None = None):
    """Per-family (related children under 18, size, age class) arrays."""
    fam = families or group_units(frame, "family_id")
    is_head = np.zeros(frame.n, dtype=bool)
    is_head[fam.head] = True
    child = (frame.age < 18) & ~is_head
    children = np.bincount(fam.index, weights=child, minlength=fam.n_units).astype(np.int64)
    age_class = (frame.age[fam.head] >= ELDERLY_AGE).astype(np.int64)
    return children, fam.size.astype(np.int64), age_class


# -- validation ------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    kind: str
    ident: int | tuple
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def __len__(self):
        return len(self.violations)

    def kinds(self) -> list[str]:
        return [v.kind for v in self.violations]


def validate_frame(
    frame: Frame | Sequence[PersonRecord],
    design: SampleDesign | None = None,
    thresholds: PovertyThresholdTable | None = None,
) -> ValidationReport:
    """List every invariant violation in a frame; the frame is acceptable iff none.

    Checks duplicate ``person_id``, households without exactly one householder,
    nonpositive weights, design labels outside the design, and family
    threshold keys missing from ``thresholds``. Pure function.
    """
    if not isinstance(frame, Frame):
        frame = Frame.from_records(list(frame))
    if frame.n == 0:
        raise ValueError("empty frame")
    out: list[Violation] = []

    pid = frame.person_id
    dup = np.unique(pid[1:][pid[1:] == pid[:-1]])
    out += [Violation("duplicate_person_id", int(p), f"person_id {p} appears more than once") for p in dup]

    hh_ids, hh_idx = np.unique(frame.household_id, return_inverse=True)
    n_head = np.bincount(hh_idx.ravel(), weights=frame.is_householder, minlength=hh_ids.shape[0])
    for h in hh_ids[n_head == 0]:
        out.append(Violation("missing_householder", int(h), f"household {h} has no householder"))
    for h, c in zip(hh_ids[n_head > 1], n_head[n_head > 1]):
        out.append(Violation("multiple_householders", int(h), f"household {h} has {int(c)} householders"))

    for name in ("w0", "w"):
        bad = frame.person_id[~(getattr(frame, name) > 0)]
        out += [Violation(f"nonpositive_{name}", int(p), f"person {p} has {name} <= 0") for p in bad]

    if design is not None:
        if design.strata is not None:
            bad = frame.person_id[~np.isin(frame.stratum_id, np.asarray(design.strata))]
            out += [Violation("unknown_stratum", int(p), f"person {p} has a stratum outside the design") for p in bad]
        if design.domains is not None:
            bad = frame.person_id[~np.isin(frame.county_id, np.asarray(design.domains))]
            out += [Violation("unknown_domain", int(p), f"person {p} has a county outside the design") for p in bad]

    if thresholds is not None:
        fam = group_units(frame, "family_id")
        ch, sz, ac = family_threshold_keys(frame, fam)
        c = thresholds.lookup(ch, sz, ac)
        for u in np.flatnonzero(np.isnan(c)):
            key = (int(ch[u]), int(sz[u]), int(ac[u]))
            out.append(
                Violation("unresolvable_threshold", int(fam.ids[u]), f"family {fam.ids[u]} has no threshold for key {key}")
            )
    return ValidationReport(out)
