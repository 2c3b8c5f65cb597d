"""Synthetic populations, Monte Carlo studies and brute-force oracles.

Incomes follow a neighborhood model: within cell g every earner's item
values are i.i.d. with mean mu_g and standard deviation sigma_g (gamma
distributed, degenerate when sigma_g = 0). The population is drawn once per
seed; each Monte Carlo replication redraws the sample and the missingness.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Mapping, Sequence

import numpy as np

from .core import Frame, PovertyThresholdTable, SampleDesign, group_units, family_threshold_keys
from .estimators import (
    ReplicationResult,
    WeightedCDF,
    linear_total,
    median_variance,
    poverty_count_variance,
    replicate_imputation,
)
from .impute import MetricConfig, impute
from .replicate import (
    FLAG_NONE,
    ReplicateFractionalWeights,
    ReplicateWeightSet,
    adjust_item,
    build_variance_groups,
    delete_one_replicates,
    replicate_factors,
)

# imputation rates by income bracket (lower bound of bracket, rate)
INCOME_BRACKET_RATES = ((0.0, 0.34), (10_000.0, 0.36), (20_000.0, 0.28), (50_000.0, 0.25), (70_000.0, 0.25))

EARNING_AGE = 15


@dataclass
class ScenarioConfig:
    """Population, design, missingness and replication settings.

    Sizes count households. ``household_sizes`` maps size to probability;
    ``{1: 1.0}`` gives one person per household. ``missing_rate`` is an
    MCAR item nonresponse rate, or ``"income"`` for the bracket-dependent
    rates in :data:`INCOME_BRACKET_RATES`.
    """

    population_households: int = 20_000
    sample_households: int = 2_000
    household_sizes: Mapping[int, float] = field(default_factory=lambda: {1: 1.0})
    family_split: float = 0.0
    n_cells: int = 5
    cell_means: Sequence[float] | None = None
    cell_sds: Sequence[float] | None = None
    n_items: int = 1
    item_shares: Sequence[float] | None = None
    item_prevalence: Sequence[float] | None = None
    county_probs: Sequence[float] = (1.0,)
    design: str = "srs"
    stratum_rates: Sequence[float] | None = None
    missing_rate: float | str = 0.3
    m1: int = 1
    m2: int = 2
    scheme: str = "grouped"
    variance_strata: int = 50
    groups_per_stratum: int = 2
    adjust_mode: str | None = None
    poverty_base: float = 14_000.0
    seed: int = 0

    def __post_init__(self):
        means, sds = self.means_sds()
        if (sds < 0).any():
            raise ValueError("cell standard deviations must be nonnegative")
        if (means <= 0).any():
            raise ValueError("cell means must be positive")
        if isinstance(self.missing_rate, str):
            if self.missing_rate != "income":
                raise ValueError("missing_rate must be a rate or 'income'")
        elif not 0.0 <= float(self.missing_rate) <= 1.0:
            raise ValueError("missing_rate must lie in [0, 1]")
        p = np.asarray(list(self.household_sizes.values()), dtype=float)
        if (p < 0).any() or not np.isclose(p.sum(), 1.0):
            raise ValueError("household size probabilities must sum to 1")
        if not np.isclose(sum(self.county_probs), 1.0):
            raise ValueError("county probabilities must sum to 1")
        if self.design not in ("srs", "stratified"):
            raise ValueError("design must be 'srs' or 'stratified'")
        if self.design == "stratified":
            rates = np.asarray(self.stratum_rates or (), dtype=float)
            if rates.shape != (len(self.county_probs),) or ((rates <= 0) | (rates > 1)).any():
                raise ValueError("stratified design needs one rate in (0, 1] per county")
        if self.scheme not in ("grouped", "delete1"):
            raise ValueError("scheme must be 'grouped' or 'delete1'")

    def means_sds(self):
        means = np.asarray(self.cell_means if self.cell_means is not None else np.linspace(15_000, 45_000, self.n_cells), dtype=float)
        sds = np.asarray(self.cell_sds if self.cell_sds is not None else 0.8 * means, dtype=float)
        if means.shape != (self.n_cells,) or sds.shape != (self.n_cells,):
            raise ValueError("need one mean and one standard deviation per cell")
        return means, sds

    def shares(self) -> np.ndarray:
        s = np.asarray(self.item_shares if self.item_shares is not None else np.full(self.n_items, 1.0 / self.n_items), dtype=float)
        if s.shape != (self.n_items,):
            raise ValueError("need one share per item")
        return s

    def prevalence(self) -> np.ndarray:
        p = np.asarray(self.item_prevalence if self.item_prevalence is not None else np.ones(self.n_items), dtype=float)
        if p.shape != (self.n_items,) or ((p < 0) | (p > 1)).any():
            raise ValueError("need one prevalence in [0, 1] per item")
        return p

    @property
    def metric(self) -> MetricConfig:
        return MetricConfig(blocking=("cell", "earner"), numeric={"x": 1.0})

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenarioConfig":
        d = dict(d)
        if "household_sizes" in d:
            d["household_sizes"] = {int(k): float(v) for k, v in d["household_sizes"].items()}
        return cls(**d)


# -- population -------------------------------------------------------------------


@dataclass
class Population:
    """Finite population in person order, households contiguous."""

    person_id: np.ndarray
    family_id: np.ndarray
    household_id: np.ndarray
    is_householder: np.ndarray
    age: np.ndarray
    cell: np.ndarray
    county: np.ndarray
    x: np.ndarray
    income: np.ndarray
    hh_start: np.ndarray
    hh_size: np.ndarray

    @property
    def n_households(self) -> int:
        return self.hh_start.shape[0]


@dataclass
class Truth:
    """Population values the estimators target."""

    item_totals: np.ndarray
    total_income: float
    domain_totals: dict
    poverty_count: float
    median_household_income: float
    thresholds: PovertyThresholdTable = field(repr=False)


def _gamma(rng, mean, sd, size):
    out = np.array(mean, dtype=float, copy=True) * np.ones(size)
    pos = np.broadcast_to(sd, out.shape) > 0
    m = np.broadcast_to(mean, out.shape)[pos]
    s = np.broadcast_to(sd, out.shape)[pos]
    out[pos] = rng.gamma((m / s) ** 2, s**2 / m)
    return out


def build_population(cfg: ScenarioConfig, rng: np.random.Generator) -> Population:
    H = cfg.population_households
    sizes_k = np.array(list(cfg.household_sizes), dtype=np.int64)
    sizes_p = np.array(list(cfg.household_sizes.values()), dtype=float)
    hh_size = rng.choice(sizes_k, size=H, p=sizes_p)
    hh_start = np.concatenate([[0], np.cumsum(hh_size)[:-1]])
    n = int(hh_size.sum())
    hh = np.repeat(np.arange(H), hh_size)
    pos = np.arange(n) - hh_start[hh]
    size = hh_size[hh]

    # the last member of larger households may form a separate family
    split = (size >= 3) & (pos == size - 1) & (rng.random(n) < cfg.family_split)
    family = 2 * (hh + 1) + split.astype(np.int64)

    adult = (pos == 0) | split | ((pos == 1) & (rng.random(n) < 0.7)) | ((pos >= 2) & (rng.random(n) < 0.3))
    age = np.where(adult, rng.integers(18, 90, n), rng.integers(0, 18, n))

    cell_hh = rng.integers(0, cfg.n_cells, H)
    county_hh = rng.choice(len(cfg.county_probs), size=H, p=np.asarray(cfg.county_probs, dtype=float))
    cell = cell_hh[hh]
    means, sds = cfg.means_sds()
    shares = cfg.shares()
    earner = age >= EARNING_AGE
    income = np.zeros((n, cfg.n_items))
    prevalence = cfg.prevalence()
    for s in range(cfg.n_items):
        income[earner, s] = _gamma(rng, means[cell[earner]] * shares[s], sds[cell[earner]] * shares[s], int(earner.sum()))
        if prevalence[s] < 1:
            income[earner, s] *= rng.random(int(earner.sum())) < prevalence[s]
    return Population(
        person_id=np.arange(1, n + 1),
        family_id=family,
        household_id=hh + 1,
        is_householder=pos == 0,
        age=age,
        cell=cell,
        county=county_hh[hh],
        x=rng.random(n),
        income=income,
        hh_start=hh_start,
        hh_size=hh_size,
    )


def synthetic_thresholds(max_size: int, base: float) -> PovertyThresholdTable:
    """Thresholds growing with family size, lower for children and elderly heads."""
    table = {}
    for size in range(1, max_size + 1):
        for children in range(0, size):
            for age_class in (0, 1):
                t = base * size**0.6 * 0.97**children * (0.92 if age_class else 1.0)
                table[(children, size, age_class)] = round(t, 2)
    return PovertyThresholdTable(table)


def population_truth(pop: Population, cfg: ScenarioConfig) -> Truth:
    thresholds = synthetic_thresholds(int(pop.hh_size.max()) + 1, cfg.poverty_base)
    total = pop.income.sum(axis=1)
    pframe = Frame.from_arrays(
        person_id=pop.person_id, family_id=pop.family_id, household_id=pop.household_id,
        is_householder=pop.is_householder, age=pop.age, income=pop.income,
    )
    fam = group_units(pframe, "family_id")
    ch, sz, ac = family_threshold_keys(pframe, fam)
    poor = fam.total(total) < thresholds.lookup(ch, sz, ac)
    hh = group_units(pframe, "household_id")
    med = float(WeightedCDF(hh.total(total), np.ones(hh.n_units)).quantile(0.5))
    return Truth(
        item_totals=pop.income.sum(axis=0),
        total_income=float(total.sum()),
        domain_totals={int(c): float(total[pop.county == c].sum()) for c in np.unique(pop.county)},
        poverty_count=float(poor[fam.index].sum()),
        median_household_income=med,
        thresholds=thresholds,
    )


_POPULATIONS: dict = {}


def population_for(cfg: ScenarioConfig) -> tuple[Population, Truth]:
    """Population and truth for a config (cached; depends on population fields and seed only)."""
    key = repr(sorted((k, v) for k, v in asdict(cfg).items() if k in _POPULATION_FIELDS))
    if key not in _POPULATIONS:
        if len(_POPULATIONS) >= 4:
            _POPULATIONS.pop(next(iter(_POPULATIONS)))
        seq = np.random.SeedSequence(cfg.seed, spawn_key=(0,))
        pop = build_population(cfg, np.random.default_rng(seq))
        _POPULATIONS[key] = (pop, population_truth(pop, cfg))
    return _POPULATIONS[key]


_POPULATION_FIELDS = {
    "population_households", "household_sizes", "family_split", "n_cells", "cell_means", "cell_sds",
    "n_items", "item_shares", "item_prevalence", "county_probs", "poverty_base", "seed",
}


# -- sample and missingness ------------------------------------------------------


def _select_households(cfg: ScenarioConfig, pop: Population, rng):
    """Sampled household indices and their design weights."""
    H = pop.n_households
    county_hh = pop.county[pop.hh_start]
    if cfg.design == "srs":
        n = cfg.sample_households
        if n > H:
            raise ValueError("sample larger than population")
        sel = np.sort(rng.choice(H, size=n, replace=False))
        return sel, np.full(n, H / n), np.zeros(n, dtype=np.int64)
    sel, w0, strat = [], [], []
    for h, rate in enumerate(cfg.stratum_rates):
        units = np.flatnonzero(county_hh == h)
        if units.size == 0:
            continue
        step = 1.0 / rate
        picks = np.floor(rng.random() * step + step * np.arange(int(np.ceil(units.size * rate)))).astype(np.int64)
        picks = picks[picks < units.size]
        sel.append(units[picks])
        w0.append(np.full(picks.size, units.size / max(picks.size, 1)))
        strat.append(np.full(picks.size, h))
    order = np.argsort(np.concatenate(sel))
    return np.concatenate(sel)[order], np.concatenate(w0)[order], np.concatenate(strat)[order]


def _missing_rates(cfg: ScenarioConfig, total_income: np.ndarray) -> np.ndarray:
    if cfg.missing_rate == "income":
        lows = np.array([b for b, _ in INCOME_BRACKET_RATES])
        rates = np.array([r for _, r in INCOME_BRACKET_RATES])
        return rates[np.searchsorted(lows, total_income, side="right") - 1]
    return np.full(total_income.shape, float(cfg.missing_rate))


def draw_sample(cfg: ScenarioConfig, pop: Population, rng: np.random.Generator) -> Frame:
    hh_sel, w0_hh, strat_hh = _select_households(cfg, pop, rng)
    if hh_sel.size < cfg.variance_strata * cfg.groups_per_stratum and cfg.scheme == "grouped":
        raise ValueError(
            f"design yields {hh_sel.size} households, fewer than H*G = {cfg.variance_strata * cfg.groups_per_stratum}"
        )
    size = pop.hh_size[hh_sel]
    rows = np.repeat(pop.hh_start[hh_sel], size) + (np.arange(size.sum()) - np.repeat(np.cumsum(size) - size, size))
    w0 = np.repeat(w0_hh, size)
    y = pop.income[rows]
    rate = _missing_rates(cfg, y.sum(axis=1))
    can_miss = pop.age[rows] >= EARNING_AGE
    missing = (rng.random(y.shape) < rate[:, None]) & can_miss[:, None]
    return Frame.from_arrays(
        person_id=pop.person_id[rows], family_id=pop.family_id[rows], household_id=pop.household_id[rows],
        is_householder=pop.is_householder[rows], age=pop.age[rows], income=y, response=~missing,
        stratum_id=np.repeat(strat_hh, size), county_id=pop.county[rows], w0=w0,
        covariates={"cell": pop.cell[rows], "age_group": age_group(pop.age[rows]), "earner": (pop.age[rows] >= EARNING_AGE).astype(np.int64), "x": pop.x[rows]},
    )


def age_group(age: np.ndarray) -> np.ndarray:
    """0 under 18, 1 for 18 to 64, 2 for 65 and over."""
    return np.searchsorted([18, 65], age, side="right")


def synthetic_margins(cfg: ScenarioConfig, dimensions: Sequence[str] = ("county_id", "age_group", "cell")) -> "ControlMargins":
    """Population person counts by county, age group and cell."""
    from .raking import ControlMargins

    pop, _ = population_for(cfg)
    cols = {"county_id": pop.county, "age_group": age_group(pop.age), "cell": pop.cell}
    controls = {}
    for d in dimensions:
        v, n = np.unique(cols[d], return_counts=True)
        controls[d] = {int(a): float(b) for a, b in zip(v, n)}
    return ControlMargins(controls)


def generate_scenario(cfg: ScenarioConfig, replication: int = 0) -> tuple[Frame, Truth]:
    """Sampled frame of one replication and the population truth.

    The population depends only on the seed; replication r draws its
    sample and missingness from an independent child stream.
    """
    pop, truth = population_for(cfg)
    rng = np.random.default_rng(_replication_seed(cfg.seed, replication))
    return draw_sample(cfg, pop, rng), truth


def _replication_seed(seed: int, r: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(1, r))


def replicate_weights_for(cfg: ScenarioConfig, frame: Frame) -> ReplicateWeightSet:
    if cfg.scheme == "delete1":
        return delete_one_replicates(frame.w)
    groups = build_variance_groups(frame, SampleDesign(cfg.variance_strata, cfg.groups_per_stratum))
    return replicate_factors(groups, frame.w0).apply(frame.w)


def replicate_scenario(cfg: ScenarioConfig, frame: Frame) -> ReplicationResult:
    assignments = impute(frame, cfg.metric, cfg.m1, cfg.m2)
    reps = replicate_weights_for(cfg, frame)
    mode = cfg.adjust_mode or ("single" if cfg.scheme == "delete1" else None)
    return replicate_imputation(frame, assignments, reps, mode)


# -- Monte Carlo -----------------------------------------------------------------


ESTIMATORS = ("total", "domain_total", "poverty", "median")


@dataclass
class EstimatorSummary:
    """Monte Carlo summary of one estimator."""

    name: str
    truth: float
    estimates: np.ndarray = field(repr=False)
    naive: np.ndarray = field(repr=False)
    adjusted: np.ndarray = field(repr=False)
    covered: np.ndarray = field(repr=False)

    @property
    def replications(self) -> int:
        return self.estimates.shape[0]

    @property
    def mc_variance(self) -> float:
        return float(np.var(self.estimates, ddof=1))

    @property
    def mean_naive(self) -> float:
        return float(self.naive.mean())

    @property
    def mean_adjusted(self) -> float:
        return float(self.adjusted.mean())

    def relative_bias(self, which: str = "adjusted") -> tuple[float, float]:
        """(mean V / MC variance - 1, its Monte Carlo standard error)."""
        v = self.adjusted if which == "adjusted" else self.naive
        R = self.replications
        d = (self.estimates - self.estimates.mean()) ** 2 * R / (R - 1)
        a, b = v.mean(), d.mean()
        cov = np.cov(np.stack([v, d])) / R
        ratio = a / b
        se = abs(ratio) * np.sqrt(cov[0, 0] / a**2 + cov[1, 1] / b**2 - 2 * cov[0, 1] / (a * b))
        return float(ratio - 1.0), float(se)

    @property
    def coverage(self) -> float:
        return float(self.covered.mean())

    @property
    def std_se(self) -> float:
        """100 x sqrt(mean adjusted V / mean naive V)."""
        return float(100.0 * np.sqrt(self.mean_adjusted / self.mean_naive))


@dataclass
class MCReport:
    config: ScenarioConfig
    summaries: dict[str, EstimatorSummary]
    diagnostics: dict = field(default_factory=dict)

    def __getitem__(self, name) -> EstimatorSummary:
        return self.summaries[name]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["estimator", "replications", "truth", "mean_estimate", "mc_variance", "mean_naive_v",
                         "mean_adjusted_v", "relbias_naive", "relbias_naive_se", "relbias_adjusted",
                         "relbias_adjusted_se", "coverage", "std_se"])
            for s in self.summaries.values():
                rn, rn_se = s.relative_bias("naive")
                ra, ra_se = s.relative_bias("adjusted")
                wr.writerow([s.name, s.replications, repr(s.truth), repr(float(s.estimates.mean())),
                             repr(s.mc_variance), repr(s.mean_naive), repr(s.mean_adjusted),
                             repr(rn), repr(rn_se), repr(ra), repr(ra_se), repr(s.coverage), repr(s.std_se)])


def _one_replication(cfg: ScenarioConfig, r: int, estimators: Sequence[str], domain: int):
    frame, truth = generate_scenario(cfg, r)
    result = replicate_scenario(cfg, frame)
    out = {}
    for name in estimators:
        if name == "total":
            rep = linear_total(result)
            est, vn, va, tv = rep.estimate, rep.naive_variance, rep.imputation_variance, truth.total_income
        elif name == "domain_total":
            z = (frame.county_id == domain).astype(float)
            rep = linear_total(result, z=z)
            est, vn, va, tv = rep.estimate, rep.naive_variance, rep.imputation_variance, truth.domain_totals[domain]
        elif name == "poverty":
            rep = poverty_count_variance(result, truth.thresholds).report
            est, vn, va, tv = rep.estimate, rep.naive_variance, rep.imputation_variance, truth.poverty_count
        elif name == "median":
            m = median_variance(result)
            est, vn, va, tv = m.median, m.naive[2], m.adjusted[2], truth.median_household_income
        else:
            raise ValueError(f"unknown estimator {name!r}")
        half = 2.0 * np.sqrt(va) if name == "median" else 1.96 * np.sqrt(va)
        out[name] = (est, vn, va, abs(est - tv) <= half)
    extra = {"out_of_domain": _out_of_domain_share(frame, result, domain)}
    return out, extra


def _out_of_domain_share(frame, result, domain):
    num = den = 0
    for a in result.assignments:
        rec = frame.county_id[a.recipients] == domain
        num += int((frame.county_id[a.donors[rec, 0]] != domain).sum())
        den += int(rec.sum())
    return num / den if den else float("nan")


def run_monte_carlo(
    cfg: ScenarioConfig,
    R: int,
    estimators: Sequence[str] = ("total",),
    domain: int = 0,
    workers: int = 1,
    trace=None,
) -> MCReport:
    """Repeat sample -> impute -> replicate -> estimate R times.

    Replication r always uses the same child seed, so serial and parallel
    runs agree exactly.
    """
    if R < 2:
        raise ValueError("need at least two replications")
    population_for(cfg)
    runs = []
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            futs = [ex.submit(_one_replication, cfg, r, tuple(estimators), domain) for r in range(R)]
            for r, f in enumerate(futs):
                try:
                    runs.append(f.result())
                except Exception as exc:
                    raise RuntimeError(f"Monte Carlo replication {r} failed: {exc}") from exc
    else:
        for r in range(R):
            try:
                runs.append(_one_replication(cfg, r, tuple(estimators), domain))
            except Exception as exc:
                raise RuntimeError(f"Monte Carlo replication {r} failed: {exc}") from exc
    _, truth = population_for(cfg)
    summaries = {}
    for name in estimators:
        arr = np.array([[*run[0][name][:3], run[0][name][3]] for run in runs], dtype=float)
        tv = {
            "total": truth.total_income,
            "domain_total": truth.domain_totals.get(domain, np.nan),
            "poverty": truth.poverty_count,
            "median": truth.median_household_income,
        }[name]
        summaries[name] = EstimatorSummary(name, tv, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3].astype(bool))
    ood = np.array([run[1]["out_of_domain"] for run in runs])
    diag = {"out_of_domain": float(ood[~np.isnan(ood)].mean()) if (~np.isnan(ood)).any() else float("nan")}
    if trace is not None:
        with open(trace, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["replication", "estimator", "estimate", "naive_v", "adjusted_v", "covered"])
            for r, run in enumerate(runs):
                for name in estimators:
                    e, vn, va, cov = run[0][name]
                    wr.writerow([r, name, repr(e), repr(vn), repr(va), int(cov)])
    return MCReport(cfg, summaries, diag)


# -- brute-force oracle ------------------------------------------------------------


@dataclass
class OracleReport:
    """Both sides of the unbiasedness conditions, evaluated by direct summation.

    ``set_*`` arrays have one entry per donor i, describing the donor set
    {i} and every donor sharing a recipient with i.
    """

    con1_max: float
    set_donors: np.ndarray
    set_residual: np.ndarray
    set_relative: np.ndarray
    set_flagged: np.ndarray
    flagged_donors: np.ndarray
    unit_residual: np.ndarray
    pooled_residual: float
    pooled_scale: float
    S: np.ndarray = field(repr=False)
    target: np.ndarray = field(repr=False)
    phi: np.ndarray = field(repr=False)

    @property
    def max_abs(self) -> float:
        r = np.abs(self.set_residual[~self.set_flagged])
        return float(r.max()) if r.size else 0.0

    @property
    def max_relative(self) -> float:
        r = self.set_relative[~self.set_flagged]
        return float(r.max()) if r.size else 0.0

    @property
    def pooled_relative(self) -> float:
        return abs(self.pooled_residual) / self.pooled_scale if self.pooled_scale else abs(self.pooled_residual)


def _alpha_tables(frame: Frame, rf: ReplicateFractionalWeights, W, w, table):
    """Donor total weights (full, naive replicate, adjusted replicate) by loops."""
    a = rf.assignment
    resp = frame.response[:, a.item]
    a1 = np.where(resp, w, 0.0)
    a1r = np.where(resp[:, None], W, 0.0)
    a2r = a1r.copy()
    for r in range(a.recipients.shape[0]):
        j = a.recipients[r]
        for c in range(a.donors.shape[1]):
            i = a.donors[r, c]
            a1[i] += w[j] * a.w1[r, c]
            a1r[i] += W[j] * a.w1[r, c]
            a2r[i] += W[j] * table[r, c]
    return a1, a1r, a2r


def oracle_condition_check(frame: Frame, rf: ReplicateFractionalWeights, reps: ReplicateWeightSet, weights=None) -> OracleReport:
    """Evaluate con1 and the donor-set sum-of-squares condition exhaustively.

    For every donor set the residual is
    sum_x [ sum_k c_k (alpha_x^(k) - alpha_x)^2 - (alpha_x^2 - alpha_x) ]
    with alpha^(k) built from the adjusted replicate fractions. A set is
    flagged when it holds a donor of a flagged or excluded adjustment, or a
    donor whose deficit no solved equation covers.
    """
    a = rf.assignment
    W, c = reps.weights, reps.c
    w = frame.w if weights is None else np.asarray(weights, dtype=float)
    table = rf.fraction_table()
    con1 = float(np.abs(table.sum(axis=1) - 1.0).max()) if table.size else 0.0
    a1, a1r, a2r = _alpha_tables(frame, rf, W, w, table)
    resp = frame.response[:, a.item]
    S = ((a2r - a1[:, None]) ** 2) @ c
    phi = ((a1r - a1[:, None]) ** 2) @ c
    target = a1**2 - a1

    flagged = set()
    for u in np.flatnonzero(rf.flag != FLAG_NONE):
        flagged.update(rf.unit_donors[u])
    for r in rf.excluded_recipient:
        flagged.update(int(x) for x in a.donors[r])
    # donors with a deficit that no solved equation covers
    covered = set()
    for u in np.flatnonzero(rf.flag == FLAG_NONE):
        covered.update(rf.unit_donors[u])
    deficit = target - phi
    tol = 1e-9 * np.maximum(1.0, np.abs(target))
    for x in np.flatnonzero(resp & (np.abs(deficit) > tol)):
        if int(x) not in covered:
            flagged.add(int(x))

    donors = np.unique(a.donors) if a.donors.size else np.zeros(0, np.int64)
    res, rel, fl = [], [], []
    for i in donors:
        members = np.unique(a.donors[(a.donors == i).any(axis=1)])
        r = float((S[members] - target[members]).sum())
        scale = float(np.abs(target[members]).sum())
        res.append(r)
        rel.append(abs(r) / scale if scale else abs(r))
        fl.append(bool(flagged.intersection(members.tolist())))

    # each solved unit on its own: replicate change from that unit's events only
    unit_res = np.zeros(rf.unit_ids.shape[0])
    for u in range(rf.unit_ids.shape[0]):
        k = rf.unit_replicate[u]
        ev = np.flatnonzero(rf.event_unit == rf.unit_ids[u])
        ev = ev[rf.event_replicate[ev] == k]
        alone = a1r[:, k].copy()
        for e in ev:
            r = rf.event_recipient[e]
            j = a.recipients[r]
            for col in range(a.donors.shape[1]):
                alone[a.donors[r, col]] += W[j, k] * (rf.event_fractions[e, col] - a.w1[r, col])
        lhs = c[k] * float(((alone - a1) ** 2 - (a1r[:, k] - a1) ** 2).sum())
        unit_res[u] = lhs - rf.target[u] if rf.flag[u] == FLAG_NONE else 0.0

    ok_units = rf.flag == FLAG_NONE
    pooled_target = 0.0
    for u in np.flatnonzero(ok_units):
        d = list(rf.unit_donors[u])
        pooled_target += float((target[d] - phi[d]).sum())
    pooled = float((S - phi)[resp].sum()) - pooled_target
    scale = float(np.abs(target[resp]).sum())
    return OracleReport(
        con1_max=con1,
        set_donors=donors,
        set_residual=np.array(res),
        set_relative=np.array(rel),
        set_flagged=np.array(fl, dtype=bool),
        flagged_donors=np.array(sorted(flagged), dtype=np.int64),
        unit_residual=unit_res,
        pooled_residual=pooled,
        pooled_scale=scale,
        S=S, target=target, phi=phi,
    )


def six_unit_scenario() -> Frame:
    """Six sampled units, two recipients, each with two nearby donors.

    Units 1, 2 donate to unit 5 and units 3, 4 to unit 6; the covariate
    keeps the two donor pairs far apart.
    """
    return Frame.from_arrays(
        person_id=np.arange(1, 7), family_id=np.arange(1, 7), household_id=np.arange(1, 7),
        is_householder=np.ones(6, dtype=bool), age=np.full(6, 40),
        income=np.array([3.0, 5.0, 8.0, 10.0, np.nan, np.nan]),
        w0=np.full(6, 10.0), covariates={"x": np.array([1.0, 2.0, 11.0, 12.0, 1.4, 11.4])},
    )


SIX_UNIT_METRIC = MetricConfig(numeric={"x": 1.0})


def random_small_frame(rng: np.random.Generator, n: int | None = None, miss_rate: float | None = None, n_cells: int = 3) -> Frame:
    """Small single-item frame with MCAR missingness for oracle checks."""
    n = int(rng.integers(60, 201)) if n is None else n
    rate = float(rng.uniform(0.2, 0.4)) if miss_rate is None else miss_rate
    y = rng.gamma(2.0, 10.0, n)
    miss = rng.random(n) < rate
    miss[:2] = False  # at least two respondents
    cell = rng.integers(0, n_cells, n)
    for g in range(n_cells):
        members = np.flatnonzero(cell == g)
        if (~miss[members]).sum() < 2:
            miss[members] = False
    y[miss] = np.nan
    return Frame.from_arrays(
        person_id=np.arange(1, n + 1), family_id=np.arange(1, n + 1), household_id=np.arange(1, n + 1),
        is_householder=np.ones(n, dtype=bool), age=np.full(n, 40), income=y, w0=np.full(n, 10.0),
        covariates={"cell": cell, "x": rng.random(n)},
    )


SMALL_FRAME_METRIC = MetricConfig(blocking=("cell",), numeric={"x": 1.0})


def small_frame_replication(frame: Frame, metric: MetricConfig, m1=1, m2=2, scheme="grouped", H=10, G=2, mode=None):
    """Single-item replication of a small frame: (assignment, reps, fractions)."""
    from .impute import impute_item

    a = impute_item(frame, 0, metric, m1, m2)
    if scheme == "delete1":
        reps = delete_one_replicates(frame.w)
        mode = mode or "single"
    else:
        reps = replicate_factors(build_variance_groups(frame, SampleDesign(H, G)), frame.w0).apply(frame.w)
        mode = mode or ("individual" if m1 == 1 else "grouped")
    rf = adjust_item(frame, a, reps, mode)
    return a, reps, rf
