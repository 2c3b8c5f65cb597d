"""Batch pipeline: impute, build replicate weights, rake, estimate.

Each stage writes a checkpoint into the output directory so later stages
can be rerun alone (``stage="estimate"`` reuses raked replicate weights).
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .core import Frame, IngestionError, PovertyThresholdTable, SampleDesign, validate_frame
from .estimators import (
    EstimateReport,
    ReplicationResult,
    domain_totals,
    emit_report,
    linear_total,
    median_variance,
    poverty_count_variance,
    replicate_imputation,
)
from .impute import DonorAssignment, MetricConfig, assign_fractional_weights, impute
from .raking import ControlMargins, RakingConfig, rake, rake_replicates, write_convergence_report
from .replicate import (
    ReplicateWeightSet,
    VarianceGroups,
    build_variance_groups,
    delta_factor,
    dump_replication_csv,
    replicate_factors,
)

log = logging.getLogger(__name__)

STAGES = ("impute", "replicate", "rake", "estimate")
ESTIMATOR_TYPES = ("total", "poverty", "median")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class RunConfig:
    """Everything a pipeline run needs; usually read from YAML."""

    persons: str | None = None
    thresholds: str | None = None
    margins: str | None = None
    synthetic: dict | None = None
    metric: MetricConfig = field(default_factory=MetricConfig)
    m1: int = 1
    m2: int = 2
    variance_strata: int = 50
    groups_per_stratum: int = 2
    adjust_mode: str | None = None
    raking: RakingConfig = field(default_factory=RakingConfig)
    estimators: list = field(default_factory=list)
    output_dir: str = "out"
    report_name: str = "report"
    report_formats: Sequence[str] = ("csv", "text")
    checkpoints: bool = True
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if not self.estimators:
            raise ValueError("estimator list is empty")
        for e in self.estimators:
            if e.get("type") not in ESTIMATOR_TYPES:
                raise ValueError(f"unknown estimator {e!r}; choose from {ESTIMATOR_TYPES}")
        if self.persons is None and self.synthetic is None:
            raise ValueError("config needs input.persons or a synthetic block")
        if not 1 <= self.m1 <= self.m2:
            raise ValueError("need 1 <= m1 <= m2")
        for f in self.report_formats:
            if f not in ("csv", "text"):
                raise ValueError(f"unknown report format {f!r}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base_dir: str | os.PathLike = ".") -> "RunConfig":
        d = dict(d)
        base = Path(base_dir)
        inp = dict(d.pop("input", {}) or {})

        def path(key):
            v = inp.get(key)
            return None if v is None else str(base / v)

        out = dict(d.pop("output", {}) or {})
        design = dict(d.pop("design", {}) or {})
        fmt = out.get("format", ["csv", "text"])
        return cls(
            persons=path("persons"),
            thresholds=path("thresholds"),
            margins=path("margins"),
            synthetic=d.pop("synthetic", None),
            metric=MetricConfig.from_dict(d.pop("metric", {}) or {}),
            m1=int(d.pop("m1", 1)),
            m2=int(d.pop("m2", 2)),
            variance_strata=int(design.get("variance_strata", 50)),
            groups_per_stratum=int(design.get("groups_per_stratum", 2)),
            adjust_mode=d.pop("adjust_mode", None),
            raking=RakingConfig.from_dict(d.pop("raking", None)),
            estimators=list(d.pop("estimators", []) or []),
            output_dir=str(base / out.get("dir", "out")),
            report_name=out.get("report", "report"),
            report_formats=[fmt] if isinstance(fmt, str) else list(fmt),
            checkpoints=bool(out.get("checkpoints", True)),
            seed=int(d.pop("seed", 0)),
            threads=int(d.pop("threads", 1)),
        )

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise IngestionError(f"config file not found: {p}")
        with open(p) as fh:
            d = yaml.safe_load(fh) or {}
        return cls.from_dict(d, p.parent)

    @property
    def design(self) -> SampleDesign:
        return SampleDesign(self.variance_strata, self.groups_per_stratum)


@dataclass
class PipelineOutput:
    reports: list[EstimateReport]
    diagnostics: dict
    files: list[Path]


class _Run:
    """State of one pipeline run, with cleanup of files it wrote."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.written: list[Path] = []
        self.diag: dict = {}

    def path(self, name) -> Path:
        p = self.out / name
        self.written.append(p)
        return p

    def cleanup(self):
        for p in self.written:
            try:
                p.unlink()
            except FileNotFoundError:
                pass


# -- ingestion ----------------------------------------------------------------


def load_inputs(cfg: RunConfig):
    """Frame, thresholds and margins (synthetic or from files)."""
    thresholds = margins = None
    if cfg.synthetic is not None:
        from .mclab import ScenarioConfig, generate_scenario, synthetic_margins

        syn = dict(cfg.synthetic)
        rep = int(syn.pop("replication", 0))
        want_margins = bool(syn.pop("margins", False))
        syn.setdefault("seed", cfg.seed)
        scfg = ScenarioConfig.from_dict(syn)
        frame, truth = generate_scenario(scfg, rep)
        thresholds = truth.thresholds
        if want_margins:
            margins = synthetic_margins(scfg)
    else:
        for p in (cfg.persons,):
            if not Path(p).exists():
                raise IngestionError(f"persons file not found: {p}")
        frame = Frame.from_csv(cfg.persons)
    if cfg.thresholds is not None:
        if not Path(cfg.thresholds).exists():
            raise IngestionError(f"thresholds file not found: {cfg.thresholds}")
        thresholds = PovertyThresholdTable.from_csv(cfg.thresholds)
    if cfg.margins is not None:
        if not Path(cfg.margins).exists():
            raise IngestionError(f"margins file not found: {cfg.margins}")
        margins = ControlMargins.from_csv(cfg.margins)
    needs_thresholds = any(e["type"] == "poverty" for e in cfg.estimators)
    if needs_thresholds and thresholds is None:
        raise IngestionError("poverty estimator requested but no thresholds file given")
    report = validate_frame(frame, cfg.design, thresholds if needs_thresholds else None)
    if not report.ok:
        shown = "; ".join(v.message for v in report.violations[:5])
        more = f" (+{len(report) - 5} more)" if len(report) > 5 else ""
        raise IngestionError(f"{len(report)} invalid records: {shown}{more}")
    return frame, thresholds, margins


# -- checkpoints ----------------------------------------------------------------


def save_assignments(path, assignments: Sequence[DonorAssignment]):
    arrays = {}
    for a in assignments:
        arrays[f"recipients_{a.item}"] = a.recipients
        arrays[f"donors_{a.item}"] = a.donors
        arrays[f"distances_{a.item}"] = a.distances
        arrays[f"m_{a.item}"] = np.array([a.m1, a.m2])
    np.savez(path, items=np.array([a.item for a in assignments]), **arrays)


def load_assignments(path) -> list[DonorAssignment]:
    with np.load(path) as z:
        out = []
        for s in z["items"]:
            m1, m2 = z[f"m_{s}"]
            a = DonorAssignment(int(s), z[f"recipients_{s}"], z[f"donors_{s}"], z[f"distances_{s}"], int(m1), int(m2))
            out.append(assign_fractional_weights(a, int(m1), int(m2)))
        return out


def save_replicates(path, reps: ReplicateWeightSet, w: np.ndarray):
    g = reps.groups
    np.savez(
        path, W=reps.weights, c=reps.c, psu=reps.psu, w=w, raked=np.array(reps.raked),
        var_stratum=g.var_stratum, group=g.group, shape=np.array([g.n_strata, g.n_groups]), delta=reps.delta,
    )


def load_replicates(path) -> tuple[ReplicateWeightSet, np.ndarray]:
    with np.load(path) as z:
        H, G = z["shape"]
        groups = VarianceGroups(z["var_stratum"], z["group"], int(H), int(G))
        reps = ReplicateWeightSet(z["c"], z["psu"], z["W"], groups, z["delta"], bool(z["raked"]))
        return reps, z["w"]


def dump_replicate_weights(path, frame: Frame, reps: ReplicateWeightSet):
    import pandas as pd

    df = pd.DataFrame(reps.weights, columns=[f"rep_{k + 1}" for k in range(reps.n_replicates)])
    df.insert(0, "person_id", frame.person_id)
    df.to_csv(path, index=False, float_format="%.10g")


# -- estimation ------------------------------------------------------------------


def run_estimators(result: ReplicationResult, specs: Sequence[Mapping], thresholds) -> list[EstimateReport]:
    f = result.frame
    reports: list[EstimateReport] = []
    for spec in specs:
        kind = spec["type"]
        name = spec.get("name", kind)
        if kind == "total":
            item = spec.get("item")
            item = None if item is None else int(item) - 1
            if spec.get("by"):
                reports += domain_totals(result, f.column(spec["by"]), item, name, spec["by"])
            else:
                reports.append(linear_total(result, item, name=name))
        elif kind == "poverty":
            groups = spec.get("age_groups") or [[0, 200]]
            for lo, hi in groups:
                z = ((f.age >= lo) & (f.age <= hi)).astype(float)
                label = name if len(groups) == 1 and [lo, hi] == [0, 200] else f"{name}[age {lo}-{hi}]"
                reports.append(poverty_count_variance(result, thresholds, z, label).report)
        elif kind == "median":
            reports.append(median_variance(result, name).report)
    return reports


# -- driver ------------------------------------------------------------------------


def run_pipeline(cfg: RunConfig, stage: str = "all", dump_replicates: str | None = None) -> PipelineOutput:
    """Run the requested stage (or all) and write reports and checkpoints.

    Any failure raises :class:`StageError` naming the stage; files written
    by the failing run are removed.
    """
    if stage != "all" and stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    run = _Run(cfg)
    todo = STAGES if stage == "all" else (stage,)
    current = "ingest"
    try:
        run.out.mkdir(parents=True, exist_ok=True)
        frame, thresholds, margins = load_inputs(cfg)
        assignments = reps = None
        w = frame.w

        current = "impute"
        if "impute" in todo:
            assignments = impute(frame, cfg.metric, cfg.m1, cfg.m2, threads=cfg.threads)
            run.diag["recipients"] = {a.item + 1: int(a.n_recipients) for a in assignments}
            if cfg.checkpoints:
                save_assignments(run.path("impute.npz"), assignments)

        current = "replicate"
        if "replicate" in todo:
            groups = build_variance_groups(frame, cfg.design)
            reps = replicate_factors(groups, frame.w0).apply(frame.w0 if margins is not None else frame.w)
            if cfg.checkpoints:
                save_replicates(run.path("replicate.npz"), reps, w)

        current = "rake"
        if "rake" in todo:
            if reps is None:
                reps, _ = load_replicates(_need(run.out / "replicate.npz", "replicate"))
            if margins is not None:
                full = rake(frame.w0, margins, cfg.raking, frame=frame)
                w = full.weights
                rr = rake_replicates(reps, margins, cfg.raking, frame=frame, in_place=True)
                reps = rr.reps
                all_reports = [full.report] + rr.reports
                write_convergence_report(run.path("raking_convergence.csv"), all_reports,
                                         ["full"] + [str(k + 1) for k in range(reps.n_replicates)])
                bad = [i for i, r in enumerate(all_reports) if not r.converged]
                run.diag["raking_unconverged"] = bad
                if bad:
                    log.warning("raking did not converge for %d weight columns", len(bad))
            else:
                log.info("no margins given; replicate weights are not raked")
            if cfg.checkpoints:
                save_replicates(run.path("rake.npz"), reps, w)
            if dump_replicates:
                Path(dump_replicates).mkdir(parents=True, exist_ok=True)
                dump_replicate_weights(_track(run, Path(dump_replicates) / "replicate_weights.csv"), frame, reps)

        current = "estimate"
        reports: list[EstimateReport] = []
        if "estimate" in todo:
            if assignments is None:
                assignments = load_assignments(_need(run.out / "impute.npz", "impute"))
            if reps is None:
                reps, w = load_replicates(_need(run.out / "rake.npz", "rake"))
            result = replicate_imputation(frame.with_weights(w), assignments, reps, cfg.adjust_mode, w, cfg.threads)
            run.diag["flagged_units"] = int(sum(len(rf.flagged_units()) for rf in result.replications))
            if dump_replicates:
                d = Path(dump_replicates)
                d.mkdir(parents=True, exist_ok=True)
                for rf in result.replications:
                    s = rf.item + 1
                    dump_replication_csv(rf, frame, _track(run, d / f"fractions_item{s}.csv"),
                                         _track(run, d / f"adjustment_item{s}.csv"))
            reports = run_estimators(result, cfg.estimators, thresholds)
            for fmt in cfg.report_formats:
                ext = "csv" if fmt == "csv" else "txt"
                emit_report(reports, run.path(f"{cfg.report_name}.{ext}"), fmt)
        return PipelineOutput(reports, run.diag, list(run.written))
    except StageError:
        run.cleanup()
        raise
    except Exception as exc:
        run.cleanup()
        raise StageError(current, f"{type(exc).__name__}: {exc}") from exc


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} missing; run stage '{stage}' first")
    return path


def _track(run: _Run, p: Path) -> Path:
    run.written.append(p)
    return p
