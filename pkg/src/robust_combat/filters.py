"""Outlier filters applied to covariate-regressed residuals.

Bundle-level filters look at one site-feature column at a time and return a
boolean include vector.  Subject-level filters score whole subjects across
all features.  :func:`apply_filter` turns either into a :class:`FilterMask`
for site-effect estimation.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from .combat import FilterMask, MaskKind, ResidualMatrix
from .data_model import HC
from .errors import ColumnTooShort, InvalidRange, MaskTooAggressive, MissingLabels, UnknownMethod

SN_CONSTANT = 1.1926
QN_CONSTANT = 2.2219
MAD_CONSTANT = 0.6745


class Method(str, enum.Enum):
    NONE = "none"
    ZS = "zs"
    IQR = "iqr"
    MAD = "mad"
    SN = "sn"
    QN = "qn"
    MMS = "mms"
    VS = "vs"
    G_ZS = "g_zs"
    G_MAD = "g_mad"
    MLP = "mlp"
    ORACLE_HC = "oracle_hc"

    @property
    def label(self) -> str:
        return _LABELS[self]

    @property
    def subject_level(self) -> bool:
        return self in (Method.G_ZS, Method.G_MAD, Method.MLP, Method.ORACLE_HC, Method.NONE)


_LABELS = {
    Method.NONE: "NO_FILTERING", Method.ZS: "ZS", Method.IQR: "IQR", Method.MAD: "MAD",
    Method.SN: "Sn", Method.QN: "Qn", Method.MMS: "MMS", Method.VS: "VS",
    Method.G_ZS: "G_ZS", Method.G_MAD: "G_MAD", Method.MLP: "MLP", Method.ORACLE_HC: "HC",
}

DEFAULT_THRESHOLDS = {
    Method.ZS: 3.0,
    Method.IQR: 1.5,
    Method.MAD: 3.5,
    Method.SN: 3.0,
    Method.QN: 3.0,
    Method.MMS: 1e-3,
    Method.VS: 0.05,
    Method.G_ZS: 1.5,
    Method.G_MAD: 3.5,
    Method.MLP: 0.5,
}

_ALIASES = {
    "no_filtering": Method.NONE, "hc": Method.ORACLE_HC, "oraclehc": Method.ORACLE_HC,
    "gzs": Method.G_ZS, "gmad": Method.G_MAD,
}


def parse_method(name: str | Method) -> Method:
    if isinstance(name, Method):
        return name
    key = str(name).strip().lower().replace("-", "_")
    try:
        return _ALIASES.get(key) or Method(key)
    except ValueError:
        raise UnknownMethod(f"unknown filter method {name!r}; choose from "
                            f"{', '.join(m.value for m in Method)}") from None


@dataclass(frozen=True, eq=False)
class FilterSpec:
    """Filter choice plus its threshold.

    ``threshold`` is T (ZS, MAD, Sn, Qn, G_ZS, G_MAD), k (IQR), the stopping
    tolerance (MMS, VS) or the probability cut-off (MLP).  ``directions``
    overrides the per-feature pathological direction (+1/-1) otherwise taken
    from the site's taxonomy; ``detector`` is the trained network for MLP.
    """

    method: Method | str
    threshold: float | None = None
    directions: np.ndarray | None = None
    detector: Any = None
    floor_fraction: float = 0.2
    min_floor: int = 4

    def __post_init__(self):
        object.__setattr__(self, "method", parse_method(self.method))
        if self.threshold is None:
            object.__setattr__(self, "threshold", DEFAULT_THRESHOLDS.get(self.method))
        elif not self.threshold > 0:
            raise InvalidRange(f"threshold must be > 0, got {self.threshold}")

    @classmethod
    def parse(cls, text: str, **kw) -> "FilterSpec":
        """``"mad"`` or ``"mad:3.0"``."""
        name, _, thr = text.partition(":")
        try:
            value = float(thr) if thr else None
        except ValueError:
            raise InvalidRange(f"bad threshold in filter {text!r}") from None
        return cls(name, value, **kw)

    @property
    def label(self) -> str:
        return self.method.label

    def __repr__(self) -> str:
        return f"FilterSpec({self.method.value!r}, threshold={self.threshold})"


# -- robust scale estimators -------------------------------------------------

def _lomed(sorted_vals: np.ndarray, axis: int = -1) -> np.ndarray:
    n = sorted_vals.shape[axis]
    return np.take(sorted_vals, (n - 1) // 2, axis=axis)


def _himed(sorted_vals: np.ndarray, axis: int = -1) -> np.ndarray:
    n = sorted_vals.shape[axis]
    return np.take(sorted_vals, n // 2, axis=axis)


def sn_scale(column) -> float:
    """Rousseeuw-Croux Sn: low median over j of the high median over k of |x_j - x_k|.

    The inner median runs over all k including k = j.  O(n^2) memory.
    """
    x = np.asarray(column, dtype=float)
    diffs = np.sort(np.abs(x[:, None] - x[None, :]), axis=1)
    inner = _himed(diffs, axis=1)
    return SN_CONSTANT * float(_lomed(np.sort(inner)))


def qn_scale(column) -> float:
    """Rousseeuw-Croux Qn: first quartile (linear interpolation) of pairwise |x_j - x_k|, j < k."""
    x = np.asarray(column, dtype=float)
    j, k = np.triu_indices(x.size, k=1)
    return QN_CONSTANT * float(np.percentile(np.abs(x[j] - x[k]), 25))


def mad(column) -> float:
    x = np.asarray(column, dtype=float)
    return float(np.median(np.abs(x - np.median(x))))


def _as_column(column, min_len: int, name: str) -> np.ndarray:
    x = np.asarray(column, dtype=float).ravel()
    if x.size < min_len:
        raise ColumnTooShort(f"{name} needs at least {min_len} values, got {x.size}")
    return x


# -- bundle-level filters ----------------------------------------------------

def filter_zscore(column, T: float = 3.0) -> np.ndarray:
    x = _as_column(column, 2, "ZS")
    sd = x.std(ddof=1)
    if sd == 0:
        return np.ones(x.size, dtype=bool)
    return np.abs(x - x.mean()) / sd <= T


def filter_iqr(column, k: float = 1.5) -> np.ndarray:
    x = _as_column(column, 4, "IQR")
    q1, q3 = np.percentile(x, [25, 75])
    iqr = q3 - q1
    return (x >= q1 - k * iqr) & (x <= q3 + k * iqr)


def filter_mad(column, T: float = 3.5) -> np.ndarray:
    x = _as_column(column, 2, "MAD")
    med = np.median(x)
    m = np.median(np.abs(x - med))
    if m == 0:
        return np.ones(x.size, dtype=bool)
    return MAD_CONSTANT * np.abs(x - med) / m <= T


def filter_sn(column, T: float = 3.0) -> np.ndarray:
    x = _as_column(column, 3, "Sn")
    s = sn_scale(x)
    if s == 0:
        return np.ones(x.size, dtype=bool)
    return np.abs(x - np.median(x)) / s <= T


def filter_qn(column, T: float = 3.0) -> np.ndarray:
    x = _as_column(column, 4, "Qn")
    q = qn_scale(x)
    if q == 0:
        return np.ones(x.size, dtype=bool)
    return np.abs(x - np.median(x)) / q <= T


def survivor_floor(n: int, fraction: float = 0.2, minimum: int = 4) -> int:
    return max(minimum, int(math.ceil(fraction * n)))


def _window_median(s: np.ndarray, lo: int, hi: int) -> float:
    k = hi - lo
    return 0.5 * (s[lo + (k - 1) // 2] + s[lo + k // 2])


def _mms_converged(s, cs, lo, hi, tol) -> bool:
    k = hi - lo
    mean = (cs[hi] - cs[lo]) / k
    med = _window_median(s, lo, hi)
    gap = abs(mean - med)
    # summation rounding: without it a column symmetric about 0 never converges
    rounding = 4 * hi * np.finfo(float).eps * max(abs(s[lo]), abs(s[hi - 1]))
    return gap <= rounding or gap < tol * abs(med)


def _vs_converged(s, cs, lo, hi, tol) -> bool:
    med = _window_median(s, lo, hi)
    win = s[lo:hi]
    n_left = int(np.searchsorted(win, med, side="left"))
    n_right = (hi - lo) - int(np.searchsorted(win, med, side="right"))
    left = (n_left * med - (cs[lo + n_left] - cs[lo])) / n_left if n_left else 0.0
    right = ((cs[hi] - cs[hi - n_right]) - n_right * med) / n_right if n_right else 0.0
    return abs(left - right) <= tol * 0.5 * (left + right)


def _one_tail_trim(column, direction: int, tol: float, converged, floor: int | None,
                   name: str, return_steps: bool):
    x = _as_column(column, 3, name)
    n = x.size
    if floor is None:
        floor = survivor_floor(n)
    order = np.argsort(x, kind="stable")
    s = x[order]
    cs = np.concatenate([[0.0], np.cumsum(s)])
    lo, hi = 0, n
    steps = 0
    # one value per step, always from the pathological tail
    while not converged(s, cs, lo, hi, tol) and hi - lo > floor:
        if direction > 0:
            hi -= 1
        else:
            lo += 1
        steps += 1
    include = np.zeros(n, dtype=bool)
    include[order[lo:hi]] = True
    return (include, steps) if return_steps else include


def filter_mms(column, direction: int, tol: float = 1e-3, floor: int | None = None,
               return_steps: bool = False):
    """Mean-median shift trimming.

    Removes the most extreme value on the pathological tail (the maximum for
    metrics that increase with disease, the minimum otherwise) until
    ``|mean - median| / |median| < tol`` or only ``floor`` values remain.
    Mean and median are recomputed after every removal.
    """
    return _one_tail_trim(column, direction, tol, _mms_converged, floor, "MMS", return_steps)


def filter_vs(column, direction: int, tol: float = 0.05, floor: int | None = None,
              return_steps: bool = False):
    """Variance-symmetry trimming.

    Same trimming as :func:`filter_mms`; stops once the mean absolute
    deviation below the median matches the one above it within ``tol``
    (relative to their average).
    """
    return _one_tail_trim(column, direction, tol, _vs_converged, floor, "VS", return_steps)


# -- subject-level filters ---------------------------------------------------

def _z_matrix(residuals) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(residuals, ResidualMatrix):
        return residuals.z, residuals.valid_features
    z = np.asarray(residuals, dtype=float)
    return z, np.ones(z.shape[1], dtype=bool)


def global_zscore_scores(residuals) -> np.ndarray:
    z, valid = _z_matrix(residuals)
    if z.shape[0] < 2:
        raise ColumnTooShort("G_ZS needs at least 2 subjects")
    z = z[:, valid]
    sd = z.std(axis=0, ddof=1)
    dev = np.abs(z - z.mean(axis=0))
    zs = np.divide(dev, sd, out=np.zeros_like(dev), where=sd > 0)
    return zs.mean(axis=1)


def global_mad_scores(residuals) -> np.ndarray:
    z, valid = _z_matrix(residuals)
    if z.shape[0] < 2:
        raise ColumnTooShort("G_MAD needs at least 2 subjects")
    z = z[:, valid]
    dev = np.abs(z - np.median(z, axis=0))
    m = np.median(dev, axis=0)
    zs = np.divide(MAD_CONSTANT * dev, m, out=np.zeros_like(dev), where=m > 0)
    return zs.mean(axis=1)


def filter_global_zscore(residuals, T: float = 1.5) -> np.ndarray:
    return global_zscore_scores(residuals) <= T


def filter_global_mad(residuals, T: float = 3.5) -> np.ndarray:
    return global_mad_scores(residuals) <= T


# -- dispatch ----------------------------------------------------------------

_COLUMN_FILTERS = {
    Method.ZS: filter_zscore,
    Method.IQR: filter_iqr,
    Method.MAD: filter_mad,
    Method.SN: filter_sn,
    Method.QN: filter_qn,
}


def apply_filter(residuals: ResidualMatrix, spec: FilterSpec | str, site=None) -> FilterMask:
    """Build the estimation mask for one standardized site.

    ``site`` (the raw :class:`CohortDataset`) supplies the metric directions
    for MMS/VS when the FilterSpec has none, and the raw features the MLP scores.
    """
    if not isinstance(spec, FilterSpec):
        spec = FilterSpec.parse(str(spec))
    method = spec.method
    z = residuals.z
    n_sub, n_feat = z.shape
    valid = residuals.valid_features
    scores = None

    if method is Method.NONE:
        mask = FilterMask(MaskKind.PER_SUBJECT, np.ones(n_sub, dtype=bool))
    elif method is Method.ORACLE_HC:
        groups = residuals.groups
        if groups is None or any(g is None for g in groups):
            raise MissingLabels("the oracle HC filter needs a group label for every subject")
        mask = FilterMask(MaskKind.PER_SUBJECT, np.array([g == HC for g in groups]))
    elif method in (Method.G_ZS, Method.G_MAD):
        fn = global_zscore_scores if method is Method.G_ZS else global_mad_scores
        scores = fn(residuals)
        mask = FilterMask(MaskKind.PER_SUBJECT, scores <= spec.threshold, scores)
    elif method is Method.MLP:
        from .mlp import predict_outliers

        if spec.detector is None:
            raise MissingLabels("the MLP filter needs a trained detector")
        if site is None:
            raise ValueError("the MLP filter scores raw site features; pass site=")
        mask = predict_outliers(spec.detector, site, spec.threshold)
    elif method in _COLUMN_FILTERS:
        fn = _COLUMN_FILTERS[method]
        inc = np.ones((n_sub, n_feat), dtype=bool)
        for v in np.flatnonzero(valid):
            inc[:, v] = fn(z[:, v], spec.threshold)
        mask = FilterMask(MaskKind.PER_VALUE, inc)
    elif method in (Method.MMS, Method.VS):
        directions = spec.directions
        if directions is None:
            if site is None:
                raise ValueError("MMS/VS need metric directions; pass site= or spec.directions")
            directions = site.taxonomy.feature_directions()
        fn = filter_mms if method is Method.MMS else filter_vs
        inc = np.ones((n_sub, n_feat), dtype=bool)
        for v in np.flatnonzero(valid):
            floor = survivor_floor(n_sub, spec.floor_fraction, spec.min_floor)
            inc[:, v] = fn(z[:, v], int(directions[v]), spec.threshold, floor)
        mask = FilterMask(MaskKind.PER_VALUE, inc)
    else:  # pragma: no cover - enum is exhaustive
        raise UnknownMethod(str(method))

    kept = mask.as_matrix(n_feat)[:, valid].sum(axis=0)
    if kept.size and kept.min() < 2:
        raise MaskTooAggressive(f"{method.label} keeps fewer than 2 subjects for "
                                f"{int((kept < 2).sum())} feature(s)")
    return mask
