"""Harmonization quality metrics and the experiment sweeps built on them."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import mlp as mlp_mod
from .combat import EBConfig, NormativeModel, fit_normative_model, inject_bias, pairwise_harmonize
from .data_model import HC, CohortDataset, FeatureTaxonomy, split_dataset
from .errors import (
    DegenerateControls,
    EmptyInput,
    NonPositiveStd,
    RobustComBatError,
    SubjectMismatch,
    ZeroReferenceStd,
)
from .filters import FilterSpec, Method
from .synth import (
    GRID_RATIOS,
    GridSite,
    augment,
    build_experiment_grid,
    sample_control_site,
    sample_site_effects,
)

log = logging.getLogger(__name__)


# -- metrics -----------------------------------------------------------------

class StdMae(NamedTuple):
    per_feature: np.ndarray
    mean: float


def reference_std(reference: CohortDataset) -> np.ndarray:
    """Per-feature sd (ddof=1) of the reference cohort, the STD_MAE denominator."""
    return reference.features.std(axis=0, ddof=1)


def std_mae(harmonized: CohortDataset, ground_truth: CohortDataset, ref_std: np.ndarray,
            skip_zero_std: bool = False) -> StdMae:
    """Mean absolute error per feature in units of the reference sd.

    With ``skip_zero_std`` features whose reference sd is zero come back as
    NaN and are left out of the mean instead of raising.
    """
    if harmonized.subject_ids != ground_truth.subject_ids:
        raise SubjectMismatch("harmonized and ground-truth cohorts hold different subjects")
    if harmonized.taxonomy != ground_truth.taxonomy:
        raise SubjectMismatch("harmonized and ground-truth cohorts use different taxonomies")
    ref_std = np.asarray(ref_std, dtype=float)
    if ref_std.shape != (harmonized.taxonomy.n_features,):
        raise SubjectMismatch("reference sd does not match the feature count")
    zero = ~(ref_std > 0)
    if zero.any() and not skip_zero_std:
        v = int(np.flatnonzero(zero)[0])
        raise ZeroReferenceStd(f"reference sd is zero for {harmonized.taxonomy.feature_names[v]}")
    err = np.abs(harmonized.features - ground_truth.features).mean(axis=0)
    per = np.where(zero, np.nan, err / np.where(zero, 1.0, ref_std))
    return StdMae(per, float(np.nanmean(per)) if (~zero).any() else math.nan)


def worst_case(values, fraction: float = 0.10) -> float:
    """Mean of the largest ``ceil(fraction * n)`` values."""
    v = np.asarray(values, dtype=float).ravel()
    v = v[~np.isnan(v)]
    if v.size == 0:
        raise EmptyInput("worst_case needs at least one value")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    k = max(1, math.ceil(fraction * v.size - 1e-9))
    return float(np.sort(v)[::-1][:k].mean())


def bhattacharyya_gaussian(dist_a: tuple[float, float], dist_b: tuple[float, float]) -> float:
    """Bhattacharyya distance between N(mu_a, sd_a^2) and N(mu_b, sd_b^2)."""
    (mu_a, sd_a), (mu_b, sd_b) = dist_a, dist_b
    if not (sd_a > 0 and sd_b > 0):
        raise NonPositiveStd(f"standard deviations must be positive, got {sd_a}, {sd_b}")
    va, vb = sd_a * sd_a, sd_b * sd_b
    return 0.25 * (mu_a - mu_b) ** 2 / (va + vb) + 0.25 * math.log(0.25 * (va / vb + vb / va + 2))


def bhattacharyya_features(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise Gaussian Bhattacharyya distance between two samples."""
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    va, vb = a.var(axis=0, ddof=1), b.var(axis=0, ddof=1)
    if np.any(va <= 0) or np.any(vb <= 0):
        raise NonPositiveStd("a feature has zero variance in one of the samples")
    return 0.25 * (mu_a - mu_b) ** 2 / (va + vb) + 0.25 * np.log(0.25 * (va / vb + vb / va + 2))


def standardized_difference(patients, controls) -> float | np.ndarray:
    """``(mean(patients) - mean(controls)) / sd(controls)``, column-wise for 2-D input."""
    p = np.asarray(patients, dtype=float)
    c = np.asarray(controls, dtype=float)
    if p.shape[0] < 2 or c.shape[0] < 2:
        raise DegenerateControls("both samples need at least 2 values")
    sd = c.std(axis=0, ddof=1)
    if np.any(sd <= 0):
        raise DegenerateControls("control sd is zero")
    out = (p.mean(axis=0) - c.mean(axis=0)) / sd
    return float(out) if np.ndim(out) == 0 else out


def per_metric(values: np.ndarray, taxonomy: FeatureTaxonomy) -> dict[str, float]:
    """Average a per-feature vector over bundles, one number per metric."""
    return {m: float(np.nanmean(values[taxonomy.metric_indices(m)])) for m in taxonomy.metrics}


# -- report ------------------------------------------------------------------

@dataclass
class SiteResult:
    site_id: str
    ratio: float
    n_subjects: int
    method: str
    n_hc: int
    mean: float = math.nan
    worst: float = math.nan
    per_feature: list[float] = field(default_factory=list)
    per_metric: dict[str, float] = field(default_factory=dict)
    excluded_hc: float = 0.0
    excluded_pathology: float = 0.0
    n_zero_std_features: int = 0
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def config_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class EvaluationReport:
    kind: str
    results: list[SiteResult] = field(default_factory=list)
    bhattacharyya: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    # -- aggregation (mean over features per site, then over sites) ---------
    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.results))

    def ratios(self) -> list[float]:
        return sorted({r.ratio for r in self.results})

    def sizes(self) -> list[int]:
        return sorted({r.n_subjects for r in self.results})

    def select(self, method: str | None = None, ratio: float | None = None,
               n_subjects: int | None = None, ok_only: bool = True) -> list[SiteResult]:
        return [r for r in self.results
                if (method is None or r.method == method)
                and (ratio is None or math.isclose(r.ratio, ratio))
                and (n_subjects is None or r.n_subjects == n_subjects)
                and (r.ok or not ok_only)]

    def mean_std_mae(self, method: str, ratio: float, n_subjects: int | None = None) -> float:
        rows = self.select(method, ratio, n_subjects)
        return float(np.mean([r.mean for r in rows])) if rows else math.nan

    def worst_std_mae(self, method: str, ratio: float, n_subjects: int | None = None) -> float:
        rows = self.select(method, ratio, n_subjects)
        return float(np.mean([r.worst for r in rows])) if rows else math.nan

    def failures(self) -> list[SiteResult]:
        return [r for r in self.results if not r.ok]

    def summary_rows(self) -> list[dict]:
        rows = []
        for n in self.sizes():
            for ratio in self.ratios():
                for m in self.methods():
                    sel = self.select(m, ratio, n)
                    if not sel and not self.select(m, ratio, n, ok_only=False):
                        continue
                    rows.append({
                        "n_subjects": n, "ratio": ratio, "method": m, "n_sites": len(sel),
                        "n_failed": len(self.select(m, ratio, n, ok_only=False)) - len(sel),
                        "n_hc": int(np.mean([r.n_hc for r in sel])) if sel else 0,
                        "mean_std_mae": self.mean_std_mae(m, ratio, n),
                        "worst10_std_mae": self.worst_std_mae(m, ratio, n),
                        "excluded_hc": float(np.mean([r.excluded_hc for r in sel])) if sel else 0,
                        "excluded_pathology":
                            float(np.mean([r.excluded_pathology for r in sel])) if sel else 0,
                    })
        return rows

    def metric_rows(self) -> list[dict]:
        rows = []
        for ratio in self.ratios():
            for m in self.methods():
                sel = self.select(m, ratio)
                if not sel:
                    continue
                metrics = sel[0].per_metric.keys()
                rows.append({"ratio": ratio, "method": m, **{
                    k: float(np.mean([r.per_metric[k] for r in sel])) for k in metrics}})
        return rows

    def bhattacharyya_table(self) -> dict[str, dict[str, float]]:
        """Method -> metric -> mean distance over all iterations and held-out sites."""
        acc: dict[str, dict[str, list[float]]] = {}
        for e in self.bhattacharyya:
            acc.setdefault(e["method"], {}).setdefault(e["metric"], []).append(e["value"])
        return {m: {k: float(np.mean(v)) for k, v in d.items()} for m, d in acc.items()}

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        return {"kind": self.kind, "metadata": self.metadata,
                "results": [asdict(r) for r in self.results],
                "bhattacharyya": self.bhattacharyya,
                "summary": self.summary_rows(),
                "bhattacharyya_table": self.bhattacharyya_table()}

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        return cls(kind=d["kind"], results=[SiteResult(**r) for r in d["results"]],
                   bhattacharyya=list(d.get("bhattacharyya", [])),
                   metadata=dict(d.get("metadata", {})))

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1, allow_nan=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def load(cls, path) -> "EvaluationReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write_csv(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        tables = [(f"{self.kind}_summary.csv", self.summary_rows()),
                  (f"{self.kind}_per_metric.csv", self.metric_rows())]
        table = self.bhattacharyya_table()
        if table:
            metrics = list(next(iter(table.values())).keys())
            tables.append((f"{self.kind}_bhattacharyya.csv",
                           [{"metric": k, **{m: table[m].get(k, math.nan) for m in table}}
                            for k in metrics]))
        for name, rows in tables:
            if not rows:
                continue
            path = out_dir / name
            with open(path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
                w.writeheader()
                w.writerows(rows)
            written.append(path)
        return written


# -- experiment runners --------------------------------------------------------

def _as_spec(f) -> FilterSpec:
    return f if isinstance(f, FilterSpec) else FilterSpec.parse(str(f))


def _resolve_specs(filters, detector) -> list[FilterSpec]:
    specs = []
    for f in filters:
        spec = _as_spec(f)
        if spec.method is Method.MLP and spec.detector is None:
            if detector is None:
                raise ValueError("MLP filtering requested without a trained detector")
            spec = FilterSpec(Method.MLP, spec.threshold, detector=detector)
        specs.append(spec)
    return specs


def evaluate_site(site: GridSite, spec: FilterSpec, model: NormativeModel,
                  ref_std: np.ndarray, eb: EBConfig = EBConfig()) -> SiteResult:
    return _evaluate_site(site, spec, model, ref_std, eb)[0]


def _evaluate_site(site, spec, model, ref_std, eb=EBConfig()):
    truth = site.truth
    is_hc = truth.is_hc
    res = SiteResult(site.site_id, site.ratio, site.n_subjects, spec.label, int(is_hc.sum()))
    try:
        out = pairwise_harmonize(site.biased, filter=spec, eb=eb, model=model)
    except RobustComBatError as exc:
        res.error = f"{type(exc).__name__}: {exc}"
        log.info("site %s / %s failed: %s", site.site_id, spec.label, res.error)
        return res, None
    score = std_mae(out.harmonized, truth, ref_std, skip_zero_std=True)
    res.per_feature = score.per_feature.tolist()
    res.mean = score.mean
    res.worst = worst_case(score.per_feature)
    res.per_metric = per_metric(score.per_feature, truth.taxonomy)
    res.n_zero_std_features = int(np.isnan(score.per_feature).sum())
    # share of each group's values kept out of estimation
    excluded = ~out.mask.as_matrix(truth.taxonomy.n_features)
    res.excluded_hc = float(excluded[is_hc].mean()) if is_hc.any() else 0.0
    res.excluded_pathology = float(excluded[~is_hc].mean()) if (~is_hc).any() else 0.0
    return res, out.harmonized


def run_experiment(grid: Sequence[GridSite], filters: Iterable = ("none", "oracle_hc"),
                   reference: CohortDataset | None = None, model: NormativeModel | None = None,
                   detector: mlp_mod.NetworkState | None = None, ref_std: np.ndarray | None = None,
                   threads: int = 1, metadata: dict | None = None,
                   kind: str = "prevalence") -> EvaluationReport:
    """Harmonize every grid site with every filter and score it against ground truth.

    One normative model (fit on ``reference`` unless given) serves all sites.
    Site failures are recorded on the report rather than raised.
    """
    if model is None:
        if reference is None:
            raise ValueError("run_experiment needs a reference cohort or a fitted model")
        model = fit_normative_model(reference)
    if ref_std is None:
        if reference is None:
            raise ValueError("run_experiment needs a reference cohort or ref_std")
        ref_std = reference_std(reference)
    specs = _resolve_specs(filters, detector)
    jobs = [(site, spec) for site in grid for spec in specs]

    def run(job):
        return evaluate_site(job[0], job[1], model, ref_std)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    meta = {"filters": [s.label for s in specs], "n_sites": len(grid),
            "detector_hash": detector.param_hash() if detector is not None else None}
    meta.update(metadata or {})
    return EvaluationReport(kind, results, metadata=meta)


def run_size_sweep(pool: CohortDataset, model: NormativeModel, ref_std: np.ndarray,
                   ratios: Sequence[float] = (0.5, 0.7, 0.8),
                   sizes: Sequence[int] = (20, 30, 40, 50, 60),
                   filters: Iterable = ("none", "oracle_hc"), sites_per_cell: int = 20,
                   seed: int = 0, detector: mlp_mod.NetworkState | None = None,
                   threads: int = 1, metadata: dict | None = None) -> EvaluationReport:
    """Prevalence grid repeated at several site sizes."""
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))
    grid: list[GridSite] = []
    for size, s in zip(sizes, seeds):
        grid += build_experiment_grid(pool, model, ratios, sites_per_cell, size,
                                      seed=int(s.generate_state(1)[0]), name_prefix=f"n{size}_")
    meta = {"sizes": list(sizes), "ratios": list(ratios), "seed": seed}
    meta.update(metadata or {})
    return run_experiment(grid, filters, model=model, detector=detector, ref_std=ref_std,
                          threads=threads, metadata=meta, kind="size")


# -- detector training -----------------------------------------------------------

def synthetic_training_sites(pool: CohortDataset, model: NormativeModel,
                             sites_per_ratio: int, seed: int, n_subjects: int = 100,
                             ratios: Sequence[float] = GRID_RATIOS, prefix: str = "") -> CohortDataset:
    """Biased synthetic sites, generated like control sites, stacked into one cohort."""
    grid = build_experiment_grid(pool, model, ratios, sites_per_ratio, n_subjects, seed,
                                 name_prefix=prefix)
    # pool subjects recur across sites, so qualify ids with the site
    return CohortDataset.concat([
        g.biased.replace(subject_ids=[f"{g.site_id}/{s}" for s in g.biased.subject_ids])
        for g in grid])


def train_detector(train_pool: CohortDataset, val_pool: CohortDataset, model: NormativeModel,
                   config: mlp_mod.NetworkConfig = mlp_mod.NetworkConfig(),
                   train_sites_per_ratio: int = 8, val_sites_per_ratio: int = 2,
                   n_subjects: int = 100) -> tuple[mlp_mod.NetworkState, mlp_mod.TrainingLog]:
    """Train the MLP on synthetic sites drawn from the (already split) detector pools."""
    s_tr, s_va = np.random.SeedSequence(config.seed).spawn(2)
    train_set = synthetic_training_sites(train_pool, model, train_sites_per_ratio,
                                         int(s_tr.generate_state(1)[0]), n_subjects, prefix="tr_")
    val_set = synthetic_training_sites(val_pool, model, val_sites_per_ratio,
                                       int(s_va.generate_state(1)[0]), n_subjects, prefix="va_")
    return mlp_mod.train(train_set, val_set, config)


# -- bootstrap -------------------------------------------------------------------

# held-out site families: labels drawn and disease ratio
SITE_FAMILIES = {
    "ADNI": (("AD", "MCI"), 0.6),
    "LA5c": (("SCHZ", "BIP", "ADHD"), 0.5),
    "TBI": (("TBI",), 0.6),
}


def _base_id(subject_id: str) -> str:
    return subject_id.split("~", 1)[0]


def _family_sites(pool: CohortDataset, model: NormativeModel, sites_per_family: int,
                  n_subjects: int, seed) -> list[tuple[str, GridSite]]:
    """Biased "acquired" sites, one group per family, with disjoint subjects."""
    used: set[str] = set()
    base = np.array([_base_id(s) for s in pool.subject_ids])
    # only original subjects: augmented copies would leak across sites
    original = np.array([s == b for s, b in zip(pool.subject_ids, base)])
    groups = np.array([g or "" for g in pool.groups])
    out = []
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    seeds = seed.spawn(len(SITE_FAMILIES) * sites_per_family)
    k = 0
    for family, (labels, ratio) in SITE_FAMILIES.items():
        for i in range(sites_per_family):
            site_seed, eff_seed = seeds[k].spawn(2)
            k += 1
            keep = original & np.isin(groups, (HC,) + tuple(labels)) & ~np.isin(base, list(used))
            sid = f"{family}_{i:02d}"
            truth = sample_control_site(pool.subset(keep), n_subjects, ratio, site_seed, sid)
            used.update(truth.subject_ids)
            eff = sample_site_effects(model, seed=eff_seed)
            out.append((family, GridSite(sid, ratio, n_subjects,
                                         inject_bias(truth, model, eff.gamma, eff.delta),
                                         truth, eff, tuple(seeds[k - 1].spawn_key))))
    return out


def run_bootstrap(pool: CohortDataset, reference: CohortDataset, model: NormativeModel,
                  n_iterations: int = 30, heldout_per_iter: int = 3,
                  filters: Iterable = ("none", "mlp"), seed: int = 0,
                  sites_per_family: int = 4, n_subjects: int = 100,
                  config: mlp_mod.NetworkConfig = mlp_mod.NetworkConfig(),
                  train_sites_per_ratio: int = 4, val_sites_per_ratio: int = 1,
                  noise_scale: float = 0.05, metadata: dict | None = None) -> EvaluationReport:
    """Leave-sites-out evaluation of HC alignment with the reference.

    A collection of acquired-like sites is drawn per family.  Each iteration
    holds out one site per family (``heldout_per_iter`` sites in total, drawn
    round-robin over families), retrains the detector on synthetic sites
    built from the remaining sites' ground-truth subjects, then harmonizes
    the held-out sites and records the per-metric Bhattacharyya distance
    between their HC and the reference HC, plus the unharmonized ("RAW")
    distance.
    """
    specs = [_as_spec(f) for f in filters]
    need_mlp = any(s.method is Method.MLP for s in specs)
    s_sites, s_iter = np.random.SeedSequence(seed).spawn(2)
    sites = _family_sites(pool, model, sites_per_family, n_subjects, s_sites)
    by_family: dict[str, list[int]] = {}
    for i, (fam, _) in enumerate(sites):
        by_family.setdefault(fam, []).append(i)
    families = list(by_family)
    ref_hc = reference.features[reference.is_hc]
    tax = reference.taxonomy
    entries: list[dict] = []
    results: list[SiteResult] = []
    ref_std = reference_std(reference)
    detector_hashes = []
    for it, it_seed in enumerate(s_iter.spawn(n_iterations)):
        rng = np.random.default_rng(it_seed)
        held = [int(rng.choice(by_family[families[h % len(families)]]))
                for h in range(heldout_per_iter)]
        held = list(dict.fromkeys(held))
        detector = None
        if need_mlp:
            rest = [sites[i][1].truth for i in range(len(sites)) if i not in held]
            train_pool = CohortDataset.concat(rest)
            tr, va, _ = split_dataset(train_pool, (0.8, 0.1, 0.1),
                                      int(it_seed.generate_state(2)[1]))
            aug_seeds = it_seed.spawn(2)
            cfg = mlp_mod.NetworkConfig(**{**asdict(config),
                                           "seed": int(it_seed.generate_state(1)[0])})
            detector, _ = train_detector(augment(tr, noise_scale, 3, aug_seeds[0]),
                                         augment(va, noise_scale, 3, aug_seeds[1]),
                                         model, cfg, train_sites_per_ratio, val_sites_per_ratio,
                                         n_subjects)
            detector_hashes.append(detector.param_hash())
        for i in held:
            family, site = sites[i]
            hc = site.truth.is_hc
            raw = bhattacharyya_features(site.biased.features[hc], ref_hc)
            for metric, value in per_metric(raw, tax).items():
                entries.append({"iteration": it, "site_id": site.site_id, "family": family,
                                "method": "RAW", "metric": metric, "value": value})
            for spec in _resolve_specs(specs, detector):
                res, harmonized = _evaluate_site(site, spec, model, ref_std)
                res.site_id = f"it{it:02d}_{site.site_id}"
                results.append(res)
                if not res.ok:
                    continue
                dist = bhattacharyya_features(harmonized.features[hc], ref_hc)
                for metric, value in per_metric(dist, tax).items():
                    entries.append({"iteration": it, "site_id": site.site_id, "family": family,
                                    "method": spec.label, "metric": metric, "value": value})
    meta = {"n_iterations": n_iterations, "heldout_per_iter": heldout_per_iter, "seed": seed,
            "filters": [s.label for s in specs], "detector_hashes": detector_hashes}
    meta.update(metadata or {})
    return EvaluationReport("bootstrap", results, entries, meta)

