"""Synthetic multi-site universe.

A "true" normative model generates a healthy reference cohort and a labelled
pool of healthy and pathological subjects.  Control sites are drawn from the
pool at fixed disease ratios and distorted with random additive and
multiplicative site effects; the pre-distortion values are kept as ground
truth for scoring harmonization.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .combat import NormativeModel, fit_normative_model, inject_bias
from .data_model import (
    DEFAULT_COVARIATES,
    HC,
    CohortDataset,
    FeatureTaxonomy,
    save_cohort,
    split_dataset,
)
from .errors import ConfigError, InvalidRange, PoolExhausted

GRID_RATIOS = (0.03, 0.10, 0.30, 0.50, 0.70, 0.80)

# value at age 50, change per year, male-female offset, residual sd
_METRIC_PARAMS = {
    "ad": (1.20, 0.0015, 0.010, 0.050),
    "adt": (1.10, 0.0012, 0.010, 0.045),
    "afd": (0.35, -0.0012, 0.005, 0.030),
    "fa": (0.45, -0.0015, 0.005, 0.030),
    "fat": (0.55, -0.0012, 0.005, 0.030),
    "fw": (0.12, 0.0012, 0.003, 0.025),
    "md": (0.80, 0.0025, 0.010, 0.040),
    "mdt": (0.72, 0.0015, 0.008, 0.035),
    "rd": (0.60, 0.0030, 0.010, 0.040),
    "rdt": (0.52, 0.0018, 0.008, 0.035),
}
_HANDEDNESS_EFFECT = 0.002


def true_normative_model(taxonomy: FeatureTaxonomy | None = None, seed: int = 0) -> NormativeModel:
    """Ground-truth generative model with age, sex and handedness effects.

    Each bundle scales its metric's baseline, slopes and noise by a fixed
    factor in [0.85, 1.15] so features are not exact copies of each other.
    Metrics without built-in parameters get FA-like values.
    """
    taxonomy = taxonomy or FeatureTaxonomy.default()
    rng = np.random.default_rng(seed)
    bundle_scale = rng.uniform(0.85, 1.15, size=len(taxonomy.bundles))
    V = taxonomy.n_features
    alpha, sigma = np.empty(V), np.empty(V)
    beta = np.empty((V, len(DEFAULT_COVARIATES)))
    for v in range(V):
        bundle, metric = taxonomy.split_name(v)
        mu, age, sex, sd = _METRIC_PARAMS.get(metric, _METRIC_PARAMS["fa"])
        k = bundle_scale[taxonomy.bundles.index(bundle)]
        beta[v] = (k * age, k * sex, _HANDEDNESS_EFFECT)
        alpha[v] = k * mu - beta[v, 0] * 50.0 - 0.5 * beta[v, 1] - 0.1 * beta[v, 2]
        sigma[v] = k * sd
    return NormativeModel(alpha=alpha, beta=beta, sigma=sigma,
                          covariate_names=DEFAULT_COVARIATES, taxonomy=taxonomy,
                          valid=np.ones(V, dtype=bool))


def sample_covariates(n: int, rng: np.random.Generator) -> np.ndarray:
    """Age uniform on [20, 85] years, sex Bernoulli(0.5), left-handedness Bernoulli(0.1)."""
    return np.column_stack([
        rng.uniform(20.0, 85.0, n),
        (rng.random(n) < 0.5).astype(float),
        (rng.random(n) < 0.1).astype(float),
    ])


# -- pathology ---------------------------------------------------------------

def vulnerable_bundles(taxonomy: FeatureTaxonomy, fraction: float = 0.2) -> list[str]:
    """Fixed subset of bundles that disease profiles affect by default."""
    k = max(1, math.ceil(fraction * len(taxonomy.bundles)))
    rng = np.random.default_rng(zlib.crc32(b"vulnerable"))
    idx = np.sort(rng.choice(len(taxonomy.bundles), size=k, replace=False))
    return [taxonomy.bundles[i] for i in idx]


@dataclass(frozen=True)
class PathologyProfile:
    """Generative disease pattern.

    ``shifts`` maps a metric or a full feature name to a signed shift in
    units of the residual sd.  A metric shift is applied to the affected
    bundles (``bundles``, or by default the shared vulnerable subset) with a
    per-bundle multiplier spread evenly over ``[1, peak_factor]``, so the
    mildest affected bundle carries exactly the given shift.  Feature keys
    are applied as-is and take precedence.  Each subject's shift is scaled
    by ``max(0, 1 + subject_variability * N(0, 1))``.
    """

    label: str
    shifts: Mapping[str, float]
    subject_variability: float = 0.3
    bundle_fraction: float = 0.2
    peak_factor: float = 2.0
    bundles: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.label == HC:
            raise ConfigError(f"{HC!r} is reserved for healthy controls")
        if self.subject_variability < 0:
            raise ConfigError("subject_variability must be >= 0")
        if not 0 < self.bundle_fraction <= 1:
            raise ConfigError("bundle_fraction must lie in (0, 1]")
        if self.peak_factor < 1:
            raise ConfigError("peak_factor must be >= 1")

    def affected_bundles(self, taxonomy: FeatureTaxonomy) -> list[str]:
        if self.bundles is not None:
            return list(self.bundles)
        return vulnerable_bundles(taxonomy, self.bundle_fraction)

    def bundle_multipliers(self, taxonomy: FeatureTaxonomy) -> dict[str, float]:
        bundles = self.affected_bundles(taxonomy)
        rng = np.random.default_rng(zlib.crc32(self.label.encode()))
        mult = np.linspace(1.0, self.peak_factor, len(bundles))[rng.permutation(len(bundles))]
        return dict(zip(bundles, mult.tolist()))

    def shift_vector(self, taxonomy: FeatureTaxonomy) -> np.ndarray:
        """Per-feature shift in sd units; signs are checked against the direction map."""
        out = np.zeros(taxonomy.n_features)
        mult = self.bundle_multipliers(taxonomy)
        features = []
        for key, shift in self.shifts.items():
            if key in taxonomy.metrics:
                metric = key
            else:
                if key not in taxonomy.feature_names:
                    raise ConfigError(f"profile {self.label}: unknown metric or feature {key!r}")
                metric = taxonomy.split_name(taxonomy.feature_index(key))[1]
                features.append((key, shift))
            if shift != 0 and np.sign(shift) != int(taxonomy.pathological_direction[metric]):
                raise ConfigError(f"profile {self.label}: shift {shift:+g} on {key} "
                                  f"contradicts the pathological direction of {metric}")
            if key in taxonomy.metrics:
                for b, k in mult.items():
                    out[taxonomy.index(b, metric)] = shift * k
        for key, shift in features:
            out[taxonomy.feature_index(key)] = shift
        return out


AD_LIKE = PathologyProfile("AD", {
    "fw": 1.02, "md": 0.8, "mdt": 0.6, "rd": 0.7, "rdt": 0.5,
    "ad": 0.5, "adt": 0.4, "fa": -0.6, "fat": -0.4, "afd": -0.7})
TBI_LIKE = PathologyProfile("TBI", {
    "afd": -1.31, "fa": -1.0, "fat": -0.8, "md": 0.7, "mdt": 0.6,
    "rd": 0.8, "rdt": 0.7, "ad": 0.4, "adt": 0.3, "fw": 0.6})
MCI_LIKE = PathologyProfile("MCI", {"fw": 0.5, "md": 0.4, "afd": -0.3, "fa": -0.3})
SCHZ_LIKE = PathologyProfile("SCHZ", {
    "fa": -0.8, "fat": -0.6, "afd": -0.7, "rd": 0.6, "md": 0.5, "fw": 0.7})
BIP_LIKE = PathologyProfile("BIP", {"fa": -0.6, "fat": -0.5, "rd": 0.5, "md": 0.4, "fw": 0.5})
ADHD_LIKE = PathologyProfile("ADHD", {"fa": -0.4, "afd": -0.4, "md": 0.3, "fw": 0.4})

DEFAULT_PROFILES = (AD_LIKE, TBI_LIKE, MCI_LIKE)
EXTENDED_PROFILES = (AD_LIKE, TBI_LIKE, MCI_LIKE, SCHZ_LIKE, BIP_LIKE, ADHD_LIKE)
PROFILES = {p.label: p for p in EXTENDED_PROFILES}


def generate_pool(model: NormativeModel, n_hc: int, profiles: Sequence[PathologyProfile] = (),
                  n_per_profile: int = 0, seed: int | np.random.SeedSequence = 0,
                  site_id: str = "pool",
                  covariate_sampler: Callable[[int, np.random.Generator], np.ndarray]
                  = sample_covariates) -> CohortDataset:
    """Draw ``y = alpha + x @ beta + sigma * (eps + severity * shift)`` per subject."""
    if n_hc < 0 or n_per_profile < 0 or (n_hc == 0 and (not profiles or n_per_profile == 0)):
        raise ConfigError("pool needs at least one subject")
    if len({p.label for p in profiles}) != len(profiles):
        raise ConfigError("profile labels must be unique")
    rng = np.random.default_rng(seed)
    tax = model.taxonomy
    ids, groups, shifts = [], [], []
    ids += [f"HC{j:05d}" for j in range(n_hc)]
    groups += [HC] * n_hc
    shifts.append(np.zeros((n_hc, tax.n_features)))
    for p in profiles:
        ids += [f"{p.label}{j:05d}" for j in range(n_per_profile)]
        groups += [p.label] * n_per_profile
        severity = np.maximum(0.0, 1.0 + p.subject_variability * rng.standard_normal(n_per_profile))
        shifts.append(severity[:, None] * p.shift_vector(tax))
    n = len(ids)
    cov = covariate_sampler(n, rng)
    eps = rng.standard_normal((n, tax.n_features))
    feats = model.expected(cov) + model.sigma * (eps + np.vstack(shifts))
    return CohortDataset(taxonomy=tax, subject_ids=ids, site_ids=[site_id] * n, groups=groups,
                         covariates=cov, features=feats, covariate_names=model.covariate_names)


def generate_reference(model: NormativeModel, n: int, seed=0,
                       site_id: str = "reference") -> CohortDataset:
    ref = generate_pool(model, n, seed=seed, site_id=site_id)
    return ref.replace(reference_site=site_id)


# -- control sites -----------------------------------------------------------

def n_pathological(n_subjects: int, ratio: float) -> int:
    """Half-up rounding of ``n * ratio`` (so 100 x 0.03 -> 3, 20 x 0.8 -> 16)."""
    return int(math.floor(n_subjects * ratio + 0.5))


def sample_control_site(pool: CohortDataset, n_subjects: int = 100, disease_ratio: float = 0.0,
                        seed=0, site_id: str = "site") -> CohortDataset:
    """Sample a site without replacement.

    Each pathological slot picks a pathology label uniformly at random among
    the labels that still have unused subjects, then a subject of that label.
    """
    if not 0 <= disease_ratio < 1:
        raise InvalidRange(f"disease ratio must lie in [0, 1), got {disease_ratio}")
    if n_subjects < 2:
        raise ConfigError("a site needs at least 2 subjects")
    rng = np.random.default_rng(seed)
    n_path = n_pathological(n_subjects, disease_ratio)
    n_hc = n_subjects - n_path
    groups = np.array([g if g is not None else "" for g in pool.groups])
    hc_idx = np.flatnonzero(groups == HC)
    labels = sorted(set(groups[groups != HC]) - {""})
    if n_hc > hc_idx.size:
        raise PoolExhausted(f"site needs {n_hc} HC, pool has {hc_idx.size}")
    chosen = list(rng.choice(hc_idx, size=n_hc, replace=False))
    if n_path:
        remaining = {label: list(rng.permutation(np.flatnonzero(groups == label)))
                     for label in labels}
        if sum(len(v) for v in remaining.values()) < n_path:
            raise PoolExhausted(f"site needs {n_path} pathological subjects, pool has "
                                f"{sum(len(v) for v in remaining.values())}")
        for _ in range(n_path):
            open_labels = [l for l in labels if remaining[l]]
            label = open_labels[rng.integers(len(open_labels))]
            chosen.append(remaining[label].pop())
    site = pool.subset(np.sort(np.array(chosen, dtype=int)))
    return site.replace(site_ids=[site_id] * site.n_subjects, reference_site=None)


@dataclass(frozen=True, eq=False)
class SiteEffectSample:
    gamma: np.ndarray
    delta: np.ndarray
    seed: int | None = None

    def summary(self) -> dict:
        return {"gamma_mean": float(self.gamma.mean()), "gamma_sd": float(self.gamma.std()),
                "delta_min": float(self.delta.min()), "delta_max": float(self.delta.max()),
                "seed": self.seed}


def sample_site_effects(model: NormativeModel, gamma_scale: float = 0.5,
                        delta_range: tuple[float, float] = (0.7, 1.4), seed=0) -> SiteEffectSample:
    """``gamma_v ~ N(0, (gamma_scale * sigma_v)^2)``, ``delta_v ~ U(delta_range)``."""
    lo, hi = map(float, delta_range)
    if not (0 < lo <= hi and np.isfinite(hi)):
        raise InvalidRange(f"delta range must satisfy 0 < lo <= hi, got {delta_range}")
    if gamma_scale < 0:
        raise InvalidRange("gamma_scale must be >= 0")
    rng = np.random.default_rng(seed)
    V = model.taxonomy.n_features
    gamma = gamma_scale * model.sigma * rng.standard_normal(V)
    delta = rng.uniform(lo, hi, V) if hi > lo else np.full(V, lo)
    return SiteEffectSample(gamma, delta, seed if isinstance(seed, int) else None)


def augment(dataset: CohortDataset, noise_scale: float = 0.05, factor: int = 3, seed=0,
            sigma: np.ndarray | None = None) -> CohortDataset:
    """Keep the originals and add ``factor - 1`` noisy copies of every subject.

    Noise is Gaussian with sd ``noise_scale * sigma_v``; ``sigma`` defaults
    to the per-feature sd (ddof=1) of ``dataset``.
    """
    if noise_scale < 0:
        raise ConfigError("noise_scale must be >= 0")
    if factor < 1:
        raise ConfigError("factor must be >= 1")
    rng = np.random.default_rng(seed)
    if sigma is None:
        sigma = dataset.features.std(axis=0, ddof=1) if dataset.n_subjects > 1 \
            else np.zeros(dataset.taxonomy.n_features)
    parts = [dataset]
    for k in range(1, factor):
        noise = noise_scale * sigma * rng.standard_normal(dataset.features.shape)
        parts.append(dataset.replace(subject_ids=[f"{s}~aug{k}" for s in dataset.subject_ids],
                                     features=dataset.features + noise))
    return CohortDataset.concat(parts)


# -- experiment grid ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GridSite:
    site_id: str
    ratio: float
    n_subjects: int
    biased: CohortDataset
    truth: CohortDataset
    effects: SiteEffectSample
    seed_key: tuple[int, ...]

    @property
    def profile_mix(self) -> dict[str, int]:
        labels = [g for g in self.truth.groups if g != HC]
        return {l: labels.count(l) for l in sorted(set(labels))}


def site_name(ratio: float, index: int, n_subjects: int | None = None) -> str:
    base = f"r{int(round(ratio * 100)):02d}_s{index:02d}"
    return base if n_subjects is None else f"n{n_subjects}_{base}"


def build_experiment_grid(pool: CohortDataset, model: NormativeModel,
                          ratios: Sequence[float] = GRID_RATIOS, sites_per_ratio: int = 40,
                          n_subjects: int = 100, seed: int = 0, gamma_scale: float = 0.5,
                          delta_range: tuple[float, float] = (0.7, 1.4),
                          name_prefix: str = "") -> list[GridSite]:
    """Sample a control site per grid cell and distort it with fresh site effects.

    Every cell gets its own child of ``SeedSequence(seed)``, so adding cells
    never changes the ones already there.
    """
    if sites_per_ratio < 1:
        raise ConfigError("sites_per_ratio must be >= 1")
    children = np.random.SeedSequence(seed).spawn(len(ratios) * sites_per_ratio)
    grid = []
    for r_i, ratio in enumerate(ratios):
        for s_i in range(sites_per_ratio):
            child = children[r_i * sites_per_ratio + s_i]
            site_seed, effect_seed = child.spawn(2)
            sid = name_prefix + site_name(ratio, s_i)
            truth = sample_control_site(pool, n_subjects, ratio, site_seed, site_id=sid)
            eff = sample_site_effects(model, gamma_scale, delta_range, effect_seed)
            biased = inject_bias(truth, model, eff.gamma, eff.delta)
            grid.append(GridSite(sid, float(ratio), n_subjects, biased, truth, eff,
                                 tuple(child.spawn_key)))
    return grid


def write_grid(grid: Sequence[GridSite], out_dir, master_seed: int, config_hash: str = "") -> Path:
    """Write biased/ground-truth CSVs and a JSON manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "sites").mkdir(parents=True, exist_ok=True)
    entries = []
    for g in grid:
        biased = out_dir / "sites" / f"{g.site_id}_biased.csv"
        truth = out_dir / "sites" / f"{g.site_id}_truth.csv"
        save_cohort(g.biased, biased)
        save_cohort(g.truth, truth)
        entries.append({
            "site_id": g.site_id, "ratio": g.ratio, "n_subjects": g.n_subjects,
            "seed_key": list(g.seed_key), "profile_mix": g.profile_mix,
            "effects": {k: v for k, v in g.effects.summary().items() if k != "seed"},
            "biased": str(biased.relative_to(out_dir)), "truth": str(truth.relative_to(out_dir)),
        })
    manifest = {"master_seed": master_seed, "config_hash": config_hash,
                "n_sites": len(entries), "sites": entries}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# -- universe ----------------------------------------------------------------

@dataclass(frozen=True)
class UniverseConfig:
    n_reference: int = 600
    n_hc: int = 1000
    n_per_profile: int = 300
    profiles: tuple[str, ...] = tuple(p.label for p in DEFAULT_PROFILES)
    noise_scale: float = 0.05
    augment_factor: int = 3
    seed: int = 0


@dataclass(frozen=True, eq=False)
class Universe:
    """Everything the experiments share.

    ``model`` is fit on ``reference`` and drives both bias injection and
    harmonization.  ``eval_pool`` feeds the control sites; the detector
    splits (already augmented) come from an independent pool.
    """

    config: UniverseConfig
    true_model: NormativeModel
    reference: CohortDataset
    model: NormativeModel
    eval_pool: CohortDataset
    train_pool: CohortDataset
    val_pool: CohortDataset
    test_pool: CohortDataset


def build_universe(config: UniverseConfig = UniverseConfig(),
                   taxonomy: FeatureTaxonomy | None = None) -> Universe:
    profiles = [PROFILES[label] for label in config.profiles]
    s_true, s_ref, s_eval, s_det, s_split, s_aug = np.random.SeedSequence(config.seed).spawn(6)
    true_model = true_normative_model(taxonomy, int(s_true.generate_state(1)[0]))
    reference = generate_reference(true_model, config.n_reference, s_ref)
    model = fit_normative_model(reference)
    eval_pool = generate_pool(true_model, config.n_hc, profiles, config.n_per_profile, s_eval)
    det_pool = generate_pool(true_model, config.n_hc, profiles, config.n_per_profile, s_det,
                             site_id="detector")
    # split first, then augment, so no subject has copies on both sides
    splits = split_dataset(det_pool, (0.8, 0.1, 0.1), int(s_split.generate_state(1)[0]))
    aug_seeds = s_aug.spawn(4)
    aug = [augment(d, config.noise_scale, config.augment_factor, s)
           for d, s in zip((eval_pool, *splits), aug_seeds)]
    return Universe(config, true_model, reference, model, *aug)
