"""Reference-anchored ComBat harmonization hardened against pathological outliers."""

from .combat import (
    EBConfig,
    FilterMask,
    MaskKind,
    NormativeModel,
    SiteEffects,
    estimate_site_effects,
    fit_normative_model,
    harmonize,
    inject_bias,
    pairwise_harmonize,
    standardize,
)
from .data_model import CohortDataset, FeatureTaxonomy, load_cohort, save_cohort, split_dataset
from .filters import FilterSpec, Method, apply_filter

__all__ = [
    "CohortDataset", "EBConfig", "FeatureTaxonomy", "FilterMask", "FilterSpec", "MaskKind",
    "Method", "NormativeModel", "SiteEffects", "apply_filter", "estimate_site_effects",
    "fit_normative_model", "harmonize", "inject_bias", "load_cohort", "pairwise_harmonize",
    "save_cohort", "split_dataset", "standardize",
]
