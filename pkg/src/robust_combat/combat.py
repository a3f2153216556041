"""Reference-anchored ComBat.

The normative model (intercept, covariate slopes, residual scale) is fit on
a healthy reference cohort only.  A moving site is standardized against it,
its additive/multiplicative effects are estimated with parametric empirical
Bayes on the subjects a filter lets through, and the whole site is mapped
back onto the reference scale.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .data_model import CohortDataset, FeatureTaxonomy
from .errors import (
    EBNonConvergence,
    MaskTooAggressive,
    NonPositiveDelta,
    RankDeficientDesign,
    ShapeMismatch,
    TaxonomyMismatch,
    TooFewSubjects,
    ZeroDispersion,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class NormativeModel:
    """Per-feature OLS fit ``y = alpha + x @ beta + sigma * eps`` on the reference.

    ``valid`` is False for features whose residual variance is zero; those
    features are passed through untouched by :func:`harmonize`.
    """

    alpha: np.ndarray
    beta: np.ndarray
    sigma: np.ndarray
    covariate_names: tuple[str, ...]
    taxonomy: FeatureTaxonomy
    valid: np.ndarray

    def covariate_effect(self, covariates: np.ndarray) -> np.ndarray:
        return np.asarray(covariates, dtype=float) @ self.beta.T

    def expected(self, covariates: np.ndarray) -> np.ndarray:
        return self.alpha + self.covariate_effect(covariates)

    @property
    def zero_variance_features(self) -> list[str]:
        names = self.taxonomy.feature_names
        return [names[v] for v in np.flatnonzero(~self.valid)]


@dataclass(frozen=True, eq=False)
class ResidualMatrix:
    z: np.ndarray
    subject_ids: tuple[str, ...]
    site_id: str
    groups: tuple[str | None, ...] | None = None
    valid: np.ndarray | None = None

    @property
    def n_subjects(self) -> int:
        return self.z.shape[0]

    @property
    def n_features(self) -> int:
        return self.z.shape[1]

    @property
    def valid_features(self) -> np.ndarray:
        if self.valid is None:
            return np.ones(self.n_features, dtype=bool)
        return self.valid


class MaskKind(enum.Enum):
    PER_VALUE = "per_value"
    PER_SUBJECT = "per_subject"


@dataclass(frozen=True, eq=False)
class FilterMask:
    """Inclusion flags for site-effect estimation (never for transformation)."""

    kind: MaskKind
    include: np.ndarray
    scores: np.ndarray | None = None

    @classmethod
    def all_included(cls, n_subjects: int) -> "FilterMask":
        return cls(MaskKind.PER_SUBJECT, np.ones(n_subjects, dtype=bool))

    def as_matrix(self, n_features: int) -> np.ndarray:
        inc = np.asarray(self.include, dtype=bool)
        if self.kind is MaskKind.PER_SUBJECT:
            return np.repeat(inc[:, None], n_features, axis=1)
        if inc.shape[1] != n_features:
            raise ShapeMismatch(f"mask has {inc.shape[1]} features, expected {n_features}")
        return inc

    @property
    def excluded_subjects(self) -> np.ndarray:
        """Subjects excluded from at least one feature."""
        inc = np.asarray(self.include, dtype=bool)
        return ~inc if inc.ndim == 1 else ~inc.all(axis=1)

    def to_csv(self, path, subject_ids: Sequence[str], feature_names: Sequence[str]) -> None:
        mat = self.as_matrix(len(feature_names)).astype(int)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(["subject_id", *feature_names]) + "\n")
            for sid, row in zip(subject_ids, mat):
                fh.write(sid + "," + ",".join(map(str, row)) + "\n")


@dataclass(frozen=True)
class EBConfig:
    tol: float = 1e-4
    max_iter: int = 100
    enabled: bool = True


@dataclass(frozen=True)
class EBHyper:
    gamma_bar: float
    tau_sq: float
    lambda_: float | None
    theta: float | None

    @property
    def degenerate_variance_prior(self) -> bool:
        return self.lambda_ is None


@dataclass(frozen=True, eq=False)
class SiteEffects:
    gamma_hat: np.ndarray
    delta_hat: np.ndarray
    gamma_star: np.ndarray
    delta_star: np.ndarray
    hyper: EBHyper
    n_used: np.ndarray
    n_iter: int = 0
    valid: np.ndarray | None = field(default=None)

    def to_dict(self) -> dict:
        h = self.hyper
        return {
            "gamma_hat": self.gamma_hat.tolist(),
            "delta_hat": self.delta_hat.tolist(),
            "gamma_star": self.gamma_star.tolist(),
            "delta_star": self.delta_star.tolist(),
            "hyper": {"gamma_bar": h.gamma_bar, "tau_sq": h.tau_sq,
                      "lambda": h.lambda_, "theta": h.theta},
            "n_used": self.n_used.astype(int).tolist(),
            "n_iter": self.n_iter,
            "valid": None if self.valid is None else self.valid.astype(bool).tolist(),
        }

    def to_json(self, path=None, indent: int | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=indent)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "SiteEffects":
        h = d["hyper"]
        return cls(
            gamma_hat=np.asarray(d["gamma_hat"], float),
            delta_hat=np.asarray(d["delta_hat"], float),
            gamma_star=np.asarray(d["gamma_star"], float),
            delta_star=np.asarray(d["delta_star"], float),
            hyper=EBHyper(h["gamma_bar"], h["tau_sq"], h["lambda"], h["theta"]),
            n_used=np.asarray(d["n_used"], int),
            n_iter=int(d.get("n_iter", 0)),
            valid=None if d.get("valid") is None else np.asarray(d["valid"], bool),
        )

    @classmethod
    def from_json(cls, text: str) -> "SiteEffects":
        return cls.from_dict(json.loads(text))


# -- operations --------------------------------------------------------------

def _check_layout(data: CohortDataset, model: NormativeModel) -> None:
    if data.taxonomy != model.taxonomy:
        raise TaxonomyMismatch("site taxonomy differs from the normative model's")
    if data.covariate_names != model.covariate_names:
        raise TaxonomyMismatch(f"site covariates {data.covariate_names} differ from model "
                               f"covariates {model.covariate_names}")


def fit_normative_model(reference: CohortDataset,
                        covariates: Sequence[str] | None = None,
                        zero_tol: float = 1e-12) -> NormativeModel:
    """OLS of every feature on ``[1, covariates]`` over the reference cohort.

    The residual standard deviation uses ``n - C - 1`` degrees of freedom.
    Features with (numerically) zero residual variance are flagged invalid
    rather than raising, so one constant column does not sink a whole fit.
    """
    names = tuple(reference.covariate_names if covariates is None else covariates)
    col = [reference.covariate_names.index(c) for c in names]
    X = reference.covariates[:, col]
    Y = reference.features
    n, n_cov = X.shape
    if n < n_cov + 2:
        raise TooFewSubjects(f"reference has {n} subjects; need at least {n_cov + 2}")
    design = np.column_stack([np.ones(n), X])
    if np.linalg.matrix_rank(design) < n_cov + 1:
        raise RankDeficientDesign(f"covariate design {('intercept',) + names} is rank deficient")
    coef, *_ = np.linalg.lstsq(design, Y, rcond=None)
    resid = Y - design @ coef
    sigma = np.sqrt((resid ** 2).sum(axis=0) / (n - n_cov - 1))
    scale = np.maximum(np.abs(Y).max(axis=0), np.finfo(float).tiny)
    valid = sigma > zero_tol * scale
    if not valid.all():
        log.warning("zero residual variance for %d feature(s); they are left unharmonized",
                    int((~valid).sum()))
    return NormativeModel(
        alpha=coef[0].copy(),
        beta=coef[1:].T.copy(),
        sigma=sigma,
        covariate_names=names,
        taxonomy=reference.taxonomy,
        valid=valid,
    )


def _model_covariates(data: CohortDataset, model: NormativeModel) -> np.ndarray:
    try:
        col = [data.covariate_names.index(c) for c in model.covariate_names]
    except ValueError:
        raise TaxonomyMismatch(f"site lacks model covariates {model.covariate_names}") from None
    return data.covariates[:, col]


def standardize(site: CohortDataset, model: NormativeModel) -> ResidualMatrix:
    if site.taxonomy != model.taxonomy:
        raise TaxonomyMismatch("site taxonomy differs from the normative model's")
    X = _model_covariates(site, model)
    safe_sigma = np.where(model.valid, model.sigma, 1.0)
    z = (site.features - model.alpha - X @ model.beta.T) / safe_sigma
    z[:, ~model.valid] = 0.0
    sites = site.sites()
    return ResidualMatrix(
        z=z,
        subject_ids=site.subject_ids,
        site_id=sites[0] if len(sites) == 1 else "+".join(sites),
        groups=site.groups,
        valid=model.valid.copy(),
    )


def estimate_site_effects(residuals: ResidualMatrix, mask: FilterMask | None = None,
                          eb: EBConfig = EBConfig()) -> SiteEffects:
    """Location/scale site effects with parametric empirical-Bayes shrinkage.

    Only included cells enter any sum; ``n`` in the posterior updates is the
    per-feature count of included values.
    """
    z = residuals.z
    n_sub, n_feat = z.shape
    valid = residuals.valid_features
    if mask is None:
        mask = FilterMask.all_included(n_sub)
    inc = mask.as_matrix(n_feat)
    if inc.shape[0] != n_sub:
        raise ShapeMismatch(f"mask covers {inc.shape[0]} subjects, residuals have {n_sub}")
    n_used = inc.sum(axis=0)
    short = np.flatnonzero(valid & (n_used < 2))
    if short.size:
        raise MaskTooAggressive(f"{short.size} feature(s) keep fewer than 2 values "
                                f"(first: feature index {short[0]}, n={n_used[short[0]]})")

    zm = np.where(inc, z, 0.0)
    n = np.maximum(n_used, 1).astype(float)
    gamma_hat = zm.sum(axis=0) / n
    ss = np.where(inc, (z - gamma_hat) ** 2, 0.0).sum(axis=0)
    var_hat = ss / np.maximum(n - 1, 1)
    zero = np.flatnonzero(valid & (var_hat <= 0))
    if zero.size:
        raise ZeroDispersion(f"included residuals of feature index {zero[0]} have zero variance")

    g = gamma_hat[valid]
    d_hat = var_hat[valid]
    nv = n[valid]
    gamma_bar = float(g.mean())
    tau_sq = float(g.var(ddof=1)) if g.size > 1 else 0.0
    m = float(d_hat.mean())
    s2 = float(d_hat.var(ddof=1)) if d_hat.size > 1 else 0.0
    if s2 <= 1e-12 * m * m:
        # zero prior variance: inverse-gamma collapses onto the common value
        lam = theta = None
    else:
        lam = m * m / s2 + 2.0
        theta = m ** 3 / s2 + m
    hyper = EBHyper(gamma_bar, tau_sq, lam, theta)

    n_iter = 0
    if not eb.enabled:
        g_star, d_star = g.copy(), d_hat.copy()
    elif lam is None:
        d_star = np.full_like(d_hat, m)
        g_star = (nv * tau_sq * g + d_star * gamma_bar) / (nv * tau_sq + d_star)
    else:
        g_old, d_old = g.copy(), d_hat.copy()
        ss_v = ss[valid]
        for n_iter in range(1, eb.max_iter + 1):
            g_new = (nv * tau_sq * g + d_old * gamma_bar) / (nv * tau_sq + d_old)
            # sum over included cells of (z - g_new)^2, via the included mean
            sum_sq = ss_v + nv * (g - g_new) ** 2
            d_new = (theta + 0.5 * sum_sq) / (0.5 * nv + lam - 1.0)
            change = max(np.abs(g_new - g_old).max(), np.abs(d_new - d_old).max())
            g_old, d_old = g_new, d_new
            if change < eb.tol:
                break
        else:
            raise EBNonConvergence(f"EB updates did not converge in {eb.max_iter} iterations "
                                   f"(last change {change:.3g})")
        g_star, d_star = g_old, d_old

    def full(values, fill):
        out = np.full(n_feat, fill, dtype=float)
        out[valid] = values
        return out

    return SiteEffects(
        gamma_hat=full(g, 0.0),
        delta_hat=full(np.sqrt(d_hat), 1.0),
        gamma_star=full(g_star, 0.0),
        delta_star=full(np.sqrt(d_star), 1.0),
        hyper=hyper,
        n_used=n_used.astype(int),
        n_iter=n_iter,
        valid=valid.copy(),
    )


def harmonize(site: CohortDataset, model: NormativeModel, effects: SiteEffects) -> CohortDataset:
    """Remove estimated site effects and return to the reference scale.

    Every subject is transformed, including those the mask kept out of
    estimation.
    """
    _check_layout(site, model)
    if effects.gamma_star.shape != (site.taxonomy.n_features,):
        raise ShapeMismatch("site effects do not match the feature count")
    z = standardize(site, model).z
    expected = model.expected(_model_covariates(site, model))
    out = (model.sigma / effects.delta_star) * (z - effects.gamma_star) + expected
    out = np.where(model.valid, out, site.features)
    return site.with_features(out)


def inject_bias(data: CohortDataset, model: NormativeModel, gamma: np.ndarray,
                delta: np.ndarray) -> CohortDataset:
    """Apply synthetic site effects around the covariate-adjusted mean (inverse of harmonize)."""
    gamma = np.asarray(gamma, dtype=float)
    delta = np.asarray(delta, dtype=float)
    v = data.taxonomy.n_features
    if gamma.shape != (v,) or delta.shape != (v,):
        raise ShapeMismatch(f"gamma/delta must have shape ({v},)")
    if np.any(delta <= 0):
        raise NonPositiveDelta(f"multiplicative effects must be > 0 (min {delta.min():.3g})")
    if data.taxonomy != model.taxonomy:
        raise TaxonomyMismatch("data taxonomy differs from the normative model's")
    expected = model.expected(_model_covariates(data, model))
    return data.with_features(expected + gamma + delta * (data.features - expected))


class PairwiseResult(NamedTuple):
    harmonized: CohortDataset
    effects: SiteEffects
    mask: FilterMask


def pairwise_harmonize(moving_site: CohortDataset, reference: CohortDataset | None = None,
                       filter=None, eb: EBConfig = EBConfig(),
                       model: NormativeModel | None = None) -> PairwiseResult:
    """Project one moving site onto the normative reference.

    ``filter`` is a :class:`robust_combat.filters.FilterSpec` (``None`` keeps
    everyone).  Pass a pre-fitted ``model`` to skip refitting the reference.
    """
    from .filters import FilterSpec, apply_filter

    if model is None:
        if reference is None:
            raise ValueError("either a reference cohort or a fitted model is required")
        if reference.taxonomy != moving_site.taxonomy:
            raise TaxonomyMismatch("moving site and reference use different taxonomies")
        model = fit_normative_model(reference)
    residuals = standardize(moving_site, model)
    spec = filter if filter is not None else FilterSpec("none")
    mask = apply_filter(residuals, spec, site=moving_site)
    effects = estimate_site_effects(residuals, mask, eb)
    return PairwiseResult(harmonize(moving_site, model, effects), effects, mask)
