"""Cohort containers, the canonical CSV format and stratified splitting.

A cohort is a subjects x features table of tract-averaged diffusion
metrics.  Features are named ``<bundle>__<metric>`` and ordered bundle-major
(all metrics of the first bundle, then the next bundle, ...).
"""

from __future__ import annotations

import csv
import enum
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DuplicateSubjectId,
    EmptySite,
    IoFailure,
    MalformedValue,
    MissingColumn,
    NonFiniteValue,
    StratumTooSmall,
    TaxonomyMismatch,
)

HC = "HC"
FEATURE_SEP = "__"
ID_COLUMNS = ("subject_id", "site_id", "group")
DEFAULT_COVARIATES = ("age", "sex", "handedness")

DEFAULT_BUNDLES = (
    "AC", "AF_L", "AF_R", "ATR_L", "ATR_R", "CC_Fr_1", "CC_Fr_2", "CC_Oc",
    "CC_Pa", "CC_Pr_Po", "CG_L", "CG_R", "CST_L", "CST_R", "C_FPH_L",
    "C_FPH_R", "FPT_L", "FPT_R", "ICP_L", "ICP_R", "IFOF_L", "IFOF_R",
    "ILF_L", "ILF_R", "MCP", "MdLF_L", "MdLF_R", "OR_L", "OR_R", "POPT_L",
    "POPT_R", "SCP_L", "SCP_R", "SLF_L", "SLF_R", "STT_L", "STT_R", "UF_L",
    "UF_R", "VOF_L", "VOF_R", "PC", "LL_L",
)
DEFAULT_METRICS = ("ad", "adt", "afd", "fa", "fat", "fw", "md", "mdt", "rd", "rdt")


class Direction(enum.IntEnum):
    """Sign of the shift a pathology induces on a metric."""

    DECREASES = -1
    INCREASES = 1


DEFAULT_DIRECTIONS = {
    "md": Direction.INCREASES,
    "mdt": Direction.INCREASES,
    "rd": Direction.INCREASES,
    "rdt": Direction.INCREASES,
    "fw": Direction.INCREASES,
    "ad": Direction.INCREASES,
    "adt": Direction.INCREASES,
    "fa": Direction.DECREASES,
    "fat": Direction.DECREASES,
    "afd": Direction.DECREASES,
}


@dataclass(frozen=True)
class FeatureTaxonomy:
    bundles: tuple[str, ...]
    metrics: tuple[str, ...]
    pathological_direction: Mapping[str, Direction] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "bundles", tuple(self.bundles))
        object.__setattr__(self, "metrics", tuple(self.metrics))
        if not self.bundles or not self.metrics:
            raise ConfigError("taxonomy needs at least one bundle and one metric")
        for kind, names in (("bundle", self.bundles), ("metric", self.metrics)):
            if len(set(names)) != len(names):
                raise ConfigError(f"duplicate {kind} identifiers in taxonomy")
            bad = [n for n in names if FEATURE_SEP in n or not n]
            if bad:
                raise ConfigError(f"invalid {kind} identifiers: {bad}")
        directions = {m: Direction(d) for m, d in dict(self.pathological_direction).items()}
        missing = [m for m in self.metrics if m not in directions]
        if missing:
            raise ConfigError(f"no pathological direction for metrics {missing}")
        object.__setattr__(
            self, "pathological_direction", {m: directions[m] for m in self.metrics}
        )
        names = tuple(f"{b}{FEATURE_SEP}{m}" for b in self.bundles for m in self.metrics)
        object.__setattr__(self, "_names", names)
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(names)})

    @classmethod
    def default(cls) -> "FeatureTaxonomy":
        """43 bundles x 10 metrics, the layout used by the detector (V = 430)."""
        return cls(DEFAULT_BUNDLES, DEFAULT_METRICS, DEFAULT_DIRECTIONS)

    @classmethod
    def from_feature_names(cls, names: Sequence[str],
                           directions: Mapping[str, Direction] | None = None) -> "FeatureTaxonomy":
        bundles: list[str] = []
        metrics: list[str] = []
        for name in names:
            bundle, sep, metric = name.partition(FEATURE_SEP)
            if not sep:
                raise MissingColumn(f"column {name!r} is not a <bundle>__<metric> feature")
            if bundle not in bundles:
                bundles.append(bundle)
            if metric not in metrics:
                metrics.append(metric)
        directions = dict(DEFAULT_DIRECTIONS if directions is None else directions)
        for m in metrics:
            directions.setdefault(m, Direction.INCREASES)
        tax = cls(tuple(bundles), tuple(metrics), directions)
        if len(names) != tax.n_features or set(names) != set(tax.feature_names):
            raise MissingColumn("feature columns do not form a complete bundle x metric grid")
        return tax

    @property
    def n_features(self) -> int:
        return len(self.bundles) * len(self.metrics)

    @property
    def feature_names(self) -> tuple[str, ...]:
        return self._names

    def index(self, bundle: str, metric: str) -> int:
        return self._index[f"{bundle}{FEATURE_SEP}{metric}"]

    def feature_index(self, name: str) -> int:
        return self._index[name]

    def split_name(self, v: int) -> tuple[str, str]:
        n_m = len(self.metrics)
        return self.bundles[v // n_m], self.metrics[v % n_m]

    def metric_indices(self, metric: str) -> np.ndarray:
        j = self.metrics.index(metric)
        return np.arange(len(self.bundles)) * len(self.metrics) + j

    def feature_metrics(self) -> np.ndarray:
        return np.tile(np.array(self.metrics, dtype=object), len(self.bundles))

    def feature_directions(self) -> np.ndarray:
        """Per-feature +1 / -1 pathological direction."""
        per_metric = np.array([int(self.pathological_direction[m]) for m in self.metrics])
        return np.tile(per_metric, len(self.bundles))

    def fingerprint(self) -> str:
        text = "|".join(self.feature_names)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    site_id: str
    group: str | None
    covariates: np.ndarray
    features: np.ndarray

    @property
    def is_hc(self) -> bool:
        return self.group == HC


def _readonly(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CohortDataset:
    """Array-backed cohort.

    ``groups`` holds ``"HC"``, a pathology label, or ``None`` when the
    subject's status is unknown.
    """

    taxonomy: FeatureTaxonomy
    subject_ids: tuple[str, ...]
    site_ids: tuple[str, ...]
    groups: tuple[str | None, ...]
    covariates: np.ndarray
    features: np.ndarray
    covariate_names: tuple[str, ...] = DEFAULT_COVARIATES
    reference_site: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "subject_ids", tuple(str(s) for s in self.subject_ids))
        object.__setattr__(self, "site_ids", tuple(str(s) for s in self.site_ids))
        object.__setattr__(self, "groups", tuple(None if g in (None, "") else str(g)
                                                 for g in self.groups))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        n = len(self.subject_ids)
        cov = _readonly(self.covariates).reshape(n, len(self.covariate_names))
        feats = _readonly(self.features).reshape(n, self.taxonomy.n_features)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "features", feats)
        if len(self.site_ids) != n or len(self.groups) != n:
            raise ValueError("subject_ids, site_ids and groups must have equal length")
        if len(set(self.subject_ids)) != n:
            seen: set[str] = set()
            dup = next(s for s in self.subject_ids if s in seen or seen.add(s))
            raise DuplicateSubjectId(f"duplicate subject_id {dup!r}")

    # -- construction -------------------------------------------------------
    @classmethod
    def from_records(cls, taxonomy: FeatureTaxonomy, records: Iterable[SubjectRecord],
                     covariate_names: Sequence[str] = DEFAULT_COVARIATES,
                     reference_site: str | None = None) -> "CohortDataset":
        records = list(records)
        n_c = len(covariate_names)
        return cls(
            taxonomy=taxonomy,
            subject_ids=[r.subject_id for r in records],
            site_ids=[r.site_id for r in records],
            groups=[r.group for r in records],
            covariates=np.array([r.covariates for r in records], dtype=float).reshape(-1, n_c),
            features=np.array([r.features for r in records], dtype=float).reshape(
                -1, taxonomy.n_features),
            covariate_names=tuple(covariate_names),
            reference_site=reference_site,
        )

    def replace(self, **changes) -> "CohortDataset":
        kw = dict(taxonomy=self.taxonomy, subject_ids=self.subject_ids, site_ids=self.site_ids,
                  groups=self.groups, covariates=self.covariates, features=self.features,
                  covariate_names=self.covariate_names, reference_site=self.reference_site)
        kw.update(changes)
        return CohortDataset(**kw)

    def with_features(self, features: np.ndarray) -> "CohortDataset":
        return self.replace(features=features)

    @staticmethod
    def concat(parts: Sequence["CohortDataset"]) -> "CohortDataset":
        if not parts:
            raise ValueError("nothing to concatenate")
        first = parts[0]
        for p in parts[1:]:
            if p.taxonomy != first.taxonomy or p.covariate_names != first.covariate_names:
                raise TaxonomyMismatch("cannot concatenate cohorts with different layouts")
        return first.replace(
            subject_ids=sum((p.subject_ids for p in parts), ()),
            site_ids=sum((p.site_ids for p in parts), ()),
            groups=sum((p.groups for p in parts), ()),
            covariates=np.vstack([p.covariates for p in parts]),
            features=np.vstack([p.features for p in parts]),
        )

    # -- access -------------------------------------------------------------
    def __len__(self) -> int:
        return len(self.subject_ids)

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def subjects(self) -> list[SubjectRecord]:
        return [SubjectRecord(s, site, g, self.covariates[j], self.features[j])
                for j, (s, site, g) in enumerate(zip(self.subject_ids, self.site_ids, self.groups))]

    @property
    def is_hc(self) -> np.ndarray:
        return np.array([g == HC for g in self.groups], dtype=bool)

    @property
    def is_labeled(self) -> bool:
        return all(g is not None for g in self.groups)

    def sites(self) -> list[str]:
        return list(dict.fromkeys(self.site_ids))

    def subset(self, idx) -> "CohortDataset":
        idx = np.asarray(idx)
        idx = np.flatnonzero(idx) if idx.dtype == bool else idx.astype(int)
        return self.replace(
            subject_ids=[self.subject_ids[i] for i in idx],
            site_ids=[self.site_ids[i] for i in idx],
            groups=[self.groups[i] for i in idx],
            covariates=self.covariates[idx],
            features=self.features[idx],
        )

    def site(self, site_id: str) -> "CohortDataset":
        idx = [j for j, s in enumerate(self.site_ids) if s == site_id]
        if not idx:
            raise EmptySite(f"site {site_id!r} not in dataset")
        return self.subset(idx)

    def equals(self, other: "CohortDataset") -> bool:
        return (self.taxonomy == other.taxonomy
                and self.subject_ids == other.subject_ids
                and self.site_ids == other.site_ids
                and self.groups == other.groups
                and self.covariate_names == other.covariate_names
                and self.reference_site == other.reference_site
                and np.array_equal(self.covariates, other.covariates)
                and np.array_equal(self.features, other.features))


# -- CSV I/O -----------------------------------------------------------------

def _parse_float(text: str, row: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise MalformedValue(f"row {row}, column {column!r}: cannot parse {text!r}") from None
    if not math.isfinite(value):
        raise NonFiniteValue(f"row {row}, column {column!r}: non-finite value {text!r}")
    return value


def load_cohort(path, taxonomy: FeatureTaxonomy | None = None,
                covariate_names: Sequence[str] = DEFAULT_COVARIATES,
                reference_site: str | None = None) -> CohortDataset:
    """Read and validate a cohort CSV.

    With ``taxonomy=None`` the bundle/metric layout is inferred from the
    header; otherwise feature columns are reordered to match ``taxonomy``.
    Row numbers in error messages are 1-based data rows (header excluded).
    """
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise MissingColumn(f"{path}: empty file, header row missing")
        header = [h.strip() for h in header]
        required = list(ID_COLUMNS) + list(covariate_names)
        for col in required:
            if col not in header:
                raise MissingColumn(f"{path}: missing column {col!r}")
        feature_cols = [h for h in header if h not in required]
        if taxonomy is None:
            if not feature_cols:
                raise MissingColumn(f"{path}: no feature columns")
            taxonomy = FeatureTaxonomy.from_feature_names(feature_cols)
        else:
            absent = [n for n in taxonomy.feature_names if n not in header]
            if absent:
                raise MissingColumn(f"{path}: missing feature column {absent[0]!r}"
                                    + (f" (+{len(absent) - 1} more)" if len(absent) > 1 else ""))
        pos = {h: i for i, h in enumerate(header)}
        if len(pos) != len(header):
            raise MissingColumn(f"{path}: duplicate column names in header")
        feat_pos = [pos[n] for n in taxonomy.feature_names]
        cov_pos = [pos[c] for c in covariate_names]

        ids, sites, groups, covs, feats = [], [], [], [], []
        seen: dict[str, int] = {}
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise MalformedValue(f"row {row_no}: expected {len(header)} fields, got {len(row)}")
            sid = row[pos["subject_id"]].strip()
            if sid in seen:
                raise DuplicateSubjectId(f"row {row_no}: subject_id {sid!r} already used "
                                         f"on row {seen[sid]}")
            seen[sid] = row_no
            ids.append(sid)
            sites.append(row[pos["site_id"]].strip())
            groups.append(row[pos["group"]].strip() or None)
            covs.append([_parse_float(row[i], row_no, c) for i, c in zip(cov_pos, covariate_names)])
            feats.append([_parse_float(row[i], row_no, header[i]) for i in feat_pos])

    if not ids:
        raise EmptySite(f"{path}: no data rows")
    counts: dict[str, int] = {}
    for s in sites:
        counts[s] = counts.get(s, 0) + 1
    small = [s for s, c in counts.items() if c < 2]
    if small:
        raise EmptySite(f"{path}: sites with fewer than 2 subjects: {small}")
    return CohortDataset(
        taxonomy=taxonomy,
        subject_ids=ids,
        site_ids=sites,
        groups=groups,
        covariates=np.array(covs, dtype=float).reshape(len(ids), len(covariate_names)),
        features=np.array(feats, dtype=float),
        covariate_names=tuple(covariate_names),
        reference_site=reference_site,
    )


def save_cohort(dataset: CohortDataset, path) -> None:
    # repr() of a float is the shortest string that round-trips exactly
    path = Path(path)
    header = list(ID_COLUMNS) + list(dataset.covariate_names) + list(dataset.taxonomy.feature_names)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for j in range(dataset.n_subjects):
                writer.writerow(
                    [dataset.subject_ids[j], dataset.site_ids[j], dataset.groups[j] or ""]
                    + [repr(float(x)) for x in dataset.covariates[j]]
                    + [repr(float(x)) for x in dataset.features[j]]
                )
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# -- splitting ---------------------------------------------------------------

def split_dataset(dataset: CohortDataset, fractions: Sequence[float] = (0.8, 0.1, 0.1),
                  seed: int = 0) -> tuple[CohortDataset, CohortDataset, CohortDataset]:
    """Stratified (HC vs pathology) train/val/test split.

    Each split keeps the original row order.  Per stratum the split sizes
    are rounded fractions, the remainder going to the test split.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, "
                          f"got {fractions}")
    rng = np.random.default_rng(seed)
    hc = dataset.is_hc
    parts: list[list[int]] = [[], [], []]
    for stratum in (np.flatnonzero(hc), np.flatnonzero(~hc)):
        n = len(stratum)
        if n == 0:
            continue
        if n < 3:
            raise StratumTooSmall(f"stratum with {n} subjects; at least 3 are required")
        order = rng.permutation(stratum)
        n_train = int(math.floor(fractions[0] * n + 0.5))
        n_val = min(int(math.floor(fractions[1] * n + 0.5)), n - n_train)
        parts[0].extend(order[:n_train])
        parts[1].extend(order[n_train:n_train + n_val])
        parts[2].extend(order[n_train + n_val:])
    return tuple(dataset.subset(np.sort(np.array(p, dtype=int))) for p in parts)
