import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robust_combat.combat import (
    EBConfig,
    FilterMask,
    MaskKind,
    ResidualMatrix,
    SiteEffects,
    estimate_site_effects,
    fit_normative_model,
    harmonize,
    inject_bias,
    pairwise_harmonize,
    standardize,
)
from robust_combat.data_model import HC, CohortDataset, FeatureTaxonomy
from robust_combat.errors import (
    EBNonConvergence,
    MaskTooAggressive,
    NonPositiveDelta,
    RankDeficientDesign,
    TaxonomyMismatch,
    TooFewSubjects,
)
from robust_combat.evaluation import reference_std, std_mae
from robust_combat.filters import FilterSpec, apply_filter

from conftest import make_dataset, small_taxonomy


def _residuals(z, ids=None):
    z = np.asarray(z, float)
    return ResidualMatrix(z, tuple(ids or [f"s{j}" for j in range(z.shape[0])]), "site")


def _generative(n, taxonomy, rng, site="s1", id_prefix="sub", groups=None, shift=None):
    """Features from a fixed linear model in age/sex/handedness plus Gaussian noise."""
    v = taxonomy.n_features
    base = np.random.default_rng(1234)
    alpha = base.uniform(0.5, 1.5, v)
    beta = base.normal(0, 0.005, (v, 3))
    sigma = base.uniform(0.05, 0.1, v)
    X = np.column_stack([rng.uniform(20, 80, n), rng.integers(0, 2, n),
                         rng.integers(0, 2, n)]).astype(float)
    Y = alpha + X @ beta.T + sigma * rng.normal(size=(n, v))
    if shift is not None:
        Y = Y + shift * sigma
    return make_dataset(n, taxonomy, rng, site=site, groups=groups, features=Y, covariates=X,
                        id_prefix=id_prefix)


# -- normative model -----------------------------------------------------------

class TestNormativeModel:
    def test_normal_equations_oracle(self, rng, tax6):
        ref = make_dataset(50, tax6, rng)
        model = fit_normative_model(ref)
        D = np.column_stack([np.ones(50), ref.covariates])
        coef = np.linalg.solve(D.T @ D, D.T @ ref.features)
        np.testing.assert_allclose(model.alpha, coef[0], rtol=0, atol=1e-9)
        np.testing.assert_allclose(model.beta, coef[1:].T, rtol=0, atol=1e-9)
        resid = ref.features - D @ coef
        np.testing.assert_allclose(model.sigma, np.sqrt((resid ** 2).sum(0) / (50 - 4)),
                                   rtol=1e-10)

    def test_exact_linear_signal(self, rng, tax6):
        ref = make_dataset(30, tax6, rng)
        age = ref.covariates[:, 0]
        feats = ref.features.copy()
        feats[:, 0] = 2 * age
        model = fit_normative_model(ref.with_features(feats), covariates=["age"])
        assert model.beta[0, 0] == pytest.approx(2, abs=1e-9)
        assert model.alpha[0] == pytest.approx(0, abs=1e-9)

    def test_constant_feature_is_flagged(self, rng, tax6, caplog):
        ref = make_dataset(30, tax6, rng)
        feats = ref.features.copy()
        feats[:, 2] = 5.0
        model = fit_normative_model(ref.with_features(feats))
        assert model.alpha[2] == pytest.approx(5)
        np.testing.assert_allclose(model.beta[2], 0, atol=1e-12)
        assert list(model.valid) == [True, True, False, True, True, True]
        assert model.zero_variance_features == ["CC__afd"]
        assert "zero residual variance" in caplog.text

    def test_too_few_subjects(self, rng, tax6):
        with pytest.raises(TooFewSubjects):
            fit_normative_model(make_dataset(4, tax6, rng))

    def test_rank_deficient(self, rng, tax6):
        ref = make_dataset(20, tax6, rng)
        cov = ref.covariates.copy()
        cov[:, 1] = 1.0  # sex constant -> collinear with intercept
        with pytest.raises(RankDeficientDesign):
            fit_normative_model(ref.replace(covariates=cov))


# -- standardization -----------------------------------------------------------

class TestStandardize:
    def test_per_element_oracle(self, rng, tax6):
        model = fit_normative_model(make_dataset(40, tax6, rng))
        site = make_dataset(15, tax6, rng, site="m")
        z = standardize(site, model).z
        for j in range(15):
            for v in range(6):
                pred = model.alpha[v] + sum(site.covariates[j, c] * model.beta[v, c]
                                            for c in range(3))
                assert abs(z[j, v] - (site.features[j, v] - pred) / model.sigma[v]) < 1e-12

    def test_centered_and_unit_shift(self, rng, tax6):
        model = fit_normative_model(make_dataset(40, tax6, rng))
        site = make_dataset(5, tax6, rng)
        expected = model.expected(site.covariates)
        z0 = standardize(site.with_features(expected), model).z
        z1 = standardize(site.with_features(expected + model.sigma), model).z
        np.testing.assert_allclose(z0, 0, atol=1e-9)
        np.testing.assert_allclose(z1, 1, atol=1e-9)

    def test_taxonomy_mismatch(self, rng, tax6):
        model = fit_normative_model(make_dataset(40, tax6, rng))
        other = make_dataset(5, small_taxonomy(bundles=("AF_L", "CC")), rng)
        with pytest.raises(TaxonomyMismatch):
            standardize(other, model)


# -- empirical Bayes -----------------------------------------------------------

def _eb_oracle(z, tol, max_iter):
    """Plain-loop parametric EB with the same stopping rule."""
    n_sub, n_feat = len(z), len(z[0])
    cols = [[z[j][v] for j in range(n_sub)] for v in range(n_feat)]
    g_hat = [sum(c) / len(c) for c in cols]
    d_hat = [sum((x - g) ** 2 for x in c) / (len(c) - 1) for c, g in zip(cols, g_hat)]
    gbar = sum(g_hat) / n_feat
    tau2 = sum((g - gbar) ** 2 for g in g_hat) / (n_feat - 1)
    m = sum(d_hat) / n_feat
    s2 = sum((d - m) ** 2 for d in d_hat) / (n_feat - 1)
    lam = m * m / s2 + 2
    theta = m ** 3 / s2 + m
    g_star, d_star = list(g_hat), list(d_hat)
    for _ in range(max_iter):
        g_new = [(n_sub * tau2 * g_hat[v] + d_star[v] * gbar) / (n_sub * tau2 + d_star[v])
                 for v in range(n_feat)]
        d_new = [(theta + 0.5 * sum((x - g_new[v]) ** 2 for x in cols[v]))
                 / (n_sub / 2 + lam - 1) for v in range(n_feat)]
        change = max(max(abs(a - b) for a, b in zip(g_new, g_star)),
                     max(abs(a - b) for a, b in zip(d_new, d_star)))
        g_star, d_star = g_new, d_new
        if change < tol:
            break
    return g_hat, d_hat, g_star, d_star


class TestEmpiricalBayes:
    def test_independent_fixed_point_oracle(self, rng):
        for _ in range(20):
            z = rng.normal(rng.normal(0, 0.5, 3), rng.uniform(0.5, 2, 3), size=(10, 3))
            for tol in (1e-4, 1e-13):
                eff = estimate_site_effects(_residuals(z), eb=EBConfig(tol=tol, max_iter=10_000))
                g_hat, d_hat, g_star, d_star = _eb_oracle(z.tolist(), tol, 10_000)
                np.testing.assert_allclose(eff.gamma_hat, g_hat, rtol=0, atol=1e-8)
                np.testing.assert_allclose(eff.delta_hat ** 2, d_hat, rtol=0, atol=1e-8)
                np.testing.assert_allclose(eff.gamma_star, g_star, rtol=0, atol=1e-8)
                np.testing.assert_allclose(eff.delta_star ** 2, d_star, rtol=0, atol=1e-8)

    def test_converged_values_solve_the_fixed_point(self, rng):
        z = rng.normal(rng.normal(0, 0.5, 5), rng.uniform(0.5, 2, 5), size=(12, 5))
        eff = estimate_site_effects(_residuals(z), eb=EBConfig(tol=1e-14, max_iter=100_000))
        h = eff.hyper
        n = 12
        g, d2 = eff.gamma_star, eff.delta_star ** 2
        np.testing.assert_allclose(
            g, (n * h.tau_sq * eff.gamma_hat + d2 * h.gamma_bar) / (n * h.tau_sq + d2), atol=1e-10)
        ss = ((z - g) ** 2).sum(0)
        np.testing.assert_allclose(d2, (h.theta + 0.5 * ss) / (n / 2 + h.lambda_ - 1), atol=1e-10)

    def test_homogeneous_prior_fixed_point(self, rng):
        col = rng.normal(0.3, 1.2, 40)
        z = np.tile(col[:, None], (1, 8))
        eff = estimate_site_effects(_residuals(z))
        np.testing.assert_allclose(eff.gamma_star, eff.gamma_hat, atol=1e-6)
        np.testing.assert_allclose(eff.delta_star, eff.delta_hat, atol=1e-6)
        assert eff.hyper.degenerate_variance_prior

    def test_single_outlying_feature_is_shrunk(self, rng):
        z = rng.normal(size=(30, 430))
        z -= z.mean(0)
        z[:, 7] += 2.0
        eff = estimate_site_effects(_residuals(z))
        assert eff.gamma_hat[7] == pytest.approx(2.0)
        assert 0 < eff.gamma_star[7] < 2

    def test_shrinkage_is_convex(self):
        gen = np.random.default_rng(5)
        for _ in range(100):
            n, v = gen.integers(3, 30), gen.integers(2, 20)
            z = gen.normal(gen.normal(0, 1, v), gen.uniform(0.3, 3, v), size=(n, v))
            eff = estimate_site_effects(_residuals(z))
            lo = np.minimum(eff.gamma_hat, eff.hyper.gamma_bar) - 1e-12
            hi = np.maximum(eff.gamma_hat, eff.hyper.gamma_bar) + 1e-12
            assert np.all((lo <= eff.gamma_star) & (eff.gamma_star <= hi))
            assert np.all(eff.delta_hat > 0) and np.all(eff.delta_star > 0)

    def test_fewer_subjects_with_same_moments_shrink_more(self, rng):
        v = 10
        g = rng.normal(0, 0.5, v)
        s = rng.uniform(0.7, 1.5, v)

        def column_block(n):
            u = rng.normal(size=(n, v))
            u = (u - u.mean(0)) / u.std(0, ddof=1)
            return g + s * u

        big = estimate_site_effects(_residuals(column_block(40)))
        small_z = np.vstack([column_block(10), rng.normal(size=(30, v)) * 50])
        include = np.zeros(40, bool)
        include[:10] = True
        small = estimate_site_effects(_residuals(small_z),
                                      FilterMask(MaskKind.PER_SUBJECT, include))
        np.testing.assert_allclose(small.gamma_hat, big.gamma_hat, atol=1e-12)
        gbar = big.hyper.gamma_bar
        assert np.all(np.abs(small.gamma_star - gbar) < np.abs(big.gamma_star - gbar))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.floats(-1e6, 1e6, allow_nan=False))
    def test_masked_cells_never_matter(self, seed, garbage):
        gen = np.random.default_rng(seed)
        z = gen.normal(size=(20, 6))
        inc = gen.random((20, 6)) > 0.3
        inc[:3] = True
        mask = FilterMask(MaskKind.PER_VALUE, inc)
        a = estimate_site_effects(_residuals(z), mask)
        z2 = np.where(inc, z, garbage)
        b = estimate_site_effects(_residuals(z2), mask)
        for field in ("gamma_hat", "delta_hat", "gamma_star", "delta_star"):
            np.testing.assert_array_equal(getattr(a, field), getattr(b, field))
        assert list(a.n_used) == list(inc.sum(0))

    def test_mask_too_aggressive(self, rng):
        inc = np.ones((10, 3), bool)
        inc[1:, 2] = False
        with pytest.raises(MaskTooAggressive):
            estimate_site_effects(_residuals(rng.normal(size=(10, 3))),
                                  FilterMask(MaskKind.PER_VALUE, inc))

    def test_non_convergence(self, rng):
        z = rng.normal(rng.normal(0, 1, 6), rng.uniform(0.5, 2, 6), size=(10, 6))
        with pytest.raises(EBNonConvergence):
            estimate_site_effects(_residuals(z), eb=EBConfig(max_iter=1, tol=1e-15))

    def test_disabled_eb_returns_raw_moments(self, rng):
        z = rng.normal(size=(10, 4))
        eff = estimate_site_effects(_residuals(z), eb=EBConfig(enabled=False))
        np.testing.assert_allclose(eff.gamma_star, z.mean(0))
        np.testing.assert_allclose(eff.delta_star, z.std(0, ddof=1))

    def test_json_round_trip(self, rng):
        eff = estimate_site_effects(_residuals(rng.normal(size=(10, 4))))
        back = SiteEffects.from_json(eff.to_json())
        for field in ("gamma_hat", "delta_hat", "gamma_star", "delta_star", "n_used"):
            np.testing.assert_array_equal(getattr(back, field), getattr(eff, field))
        assert back.hyper == eff.hyper
        keys = set(eff.to_dict())
        assert {"gamma_hat", "delta_hat", "gamma_star", "delta_star", "hyper",
                "n_used"} <= keys


# -- harmonize / inject --------------------------------------------------------

def _effects(v, gamma, delta):
    return SiteEffects(np.asarray(gamma, float), np.asarray(delta, float),
                       np.asarray(gamma, float), np.asarray(delta, float),
                       None, np.full(v, 10))


class TestHarmonizeInject:
    def test_identity_effects(self, rng, tax6):
        model = fit_normative_model(make_dataset(40, tax6, rng))
        site = make_dataset(10, tax6, rng)
        out = harmonize(site, model, _effects(6, np.zeros(6), np.ones(6)))
        np.testing.assert_allclose(out.features, site.features, rtol=0, atol=1e-13)

    def test_inject_neutral_is_identity(self, rng, tax6):
        model = fit_normative_model(make_dataset(40, tax6, rng))
        site = make_dataset(10, tax6, rng)
        out = inject_bias(site, model, np.zeros(6), np.ones(6))
        np.testing.assert_allclose(out.features, site.features, rtol=0, atol=1e-13)

    def test_inject_then_standardize(self, rng, tax6):
        model = fit_normative_model(make_dataset(40, tax6, rng))
        site = make_dataset(25, tax6, rng)
        gamma = rng.normal(0, 0.5, 6)
        delta = rng.uniform(0.5, 2, 6)
        z = standardize(site, model).z
        zt = standardize(inject_bias(site, model, gamma, delta), model).z
        np.testing.assert_allclose(zt, gamma / model.sigma + delta * z, rtol=0, atol=1e-12)

    def test_additive_shift_of_one_sigma(self, rng, tax6):
        model = fit_normative_model(make_dataset(40, tax6, rng))
        site = make_dataset(25, tax6, rng)
        out = inject_bias(site, model, model.sigma, np.ones(6))
        np.testing.assert_allclose(out.features.mean(0) - site.features.mean(0), model.sigma,
                                   rtol=1e-12)

    def test_non_positive_delta(self, rng, tax6):
        model = fit_normative_model(make_dataset(40, tax6, rng))
        delta = np.ones(6)
        delta[3] = 0
        with pytest.raises(NonPositiveDelta):
            inject_bias(make_dataset(5, tax6, rng), model, np.zeros(6), delta)

    def test_raw_moment_identity(self, rng, tax6):
        model = fit_normative_model(_generative(200, tax6, rng))
        site = _generative(60, tax6, rng, site="m")
        res = standardize(site, model)
        eff = estimate_site_effects(res, eb=EBConfig(enabled=False))
        out = harmonize(site, model, eff)
        expected = model.expected(site.covariates)
        np.testing.assert_allclose(out.features.mean(0), model.alpha + (expected - model.alpha)
                                   .mean(0), rtol=0, atol=1e-10)
        np.testing.assert_allclose((out.features - expected).std(0, ddof=1), model.sigma,
                                   rtol=0, atol=1e-10)

    def test_round_trip_recovers_original(self, rng):
        tax = FeatureTaxonomy.default()
        truth = _generative(100, tax, rng)
        model = fit_normative_model(truth)
        gamma = rng.normal(0, 0.5, tax.n_features) * model.sigma
        delta = rng.uniform(0.7, 1.4, tax.n_features)
        biased = inject_bias(truth, model, gamma, delta)
        out = harmonize(biased, model, estimate_site_effects(standardize(biased, model)))
        assert std_mae(out, truth, reference_std(truth)).mean < 0.05

    def test_monte_carlo_alignment(self, rng, tax6):
        model = fit_normative_model(_generative(2000, tax6, rng))
        n = 10_000
        site = _generative(n, tax6, rng, site="m")
        biased = inject_bias(site, model, 0.8 * model.sigma, np.full(6, 1.3))
        out = harmonize(biased, model, estimate_site_effects(standardize(biased, model)))
        z = (out.features - model.expected(out.covariates)) / model.sigma
        assert np.all(np.abs(z.mean(0)) < 3 / math.sqrt(n))
        assert np.all(np.abs(z.var(0, ddof=1) - 1) < 3 / math.sqrt(n))

    def test_invalid_feature_passes_through(self, rng, tax6):
        ref = make_dataset(30, tax6, rng)
        feats = ref.features.copy()
        feats[:, 1] = 2.0
        model = fit_normative_model(ref.with_features(feats))
        site = make_dataset(10, tax6, rng)
        out = harmonize(site, model, estimate_site_effects(standardize(site, model)))
        np.testing.assert_array_equal(out.features[:, 1], site.features[:, 1])
        assert np.isfinite(out.features).all()


# -- pairwise pipeline ---------------------------------------------------------

class TestPairwise:
    def test_self_harmonization(self, rng, tax6):
        ref = _generative(10_000, tax6, rng)
        model = fit_normative_model(ref)
        res = pairwise_harmonize(ref, model=model)
        err = np.abs(res.harmonized.features - ref.features) / model.sigma
        assert err.max() < 1e-3

    def test_matches_manual_chain(self, rng, tax6):
        ref = _generative(200, tax6, rng)
        groups = [HC] * 30 + ["AD"] * 20
        site = _generative(50, tax6, rng, site="m", groups=groups)
        spec = FilterSpec.parse("mad")
        res = pairwise_harmonize(site, ref, filter=spec)
        model = fit_normative_model(ref)
        resid = standardize(site, model)
        mask = apply_filter(resid, spec, site=site)
        eff = estimate_site_effects(resid, mask)
        np.testing.assert_array_equal(res.harmonized.features,
                                      harmonize(site, model, eff).features)
        np.testing.assert_array_equal(res.mask.include, mask.include)

    def _shifted_site(self, rng, tax, model, n_hc=50, n_p=50, shift=-2.0):
        hc = _generative(n_hc, tax, rng, site="m")
        pat = _generative(n_p, tax, rng, site="m", id_prefix="pat", groups=["TBI"] * n_p,
                          shift=shift)
        truth = CohortDataset.concat([hc, pat])
        biased = inject_bias(truth, model, -model.sigma, np.full(tax.n_features, 1.2))
        return truth, biased

    def test_hc_mask_aligns_controls_and_keeps_pathology_shifted(self, rng, tax6):
        model = fit_normative_model(_generative(500, tax6, rng))
        truth, biased = self._shifted_site(rng, tax6, model)
        hc = np.asarray(truth.is_hc)
        oracle = pairwise_harmonize(biased, filter=FilterSpec.parse("oracle_hc"), model=model)
        z = standardize(oracle.harmonized, model).z
        assert np.all(np.abs(z[hc].mean(0)) < 0.4)
        assert np.all(z[~hc].mean(0) < -1.5)
        naive = pairwise_harmonize(biased, model=model)
        zn = standardize(naive.harmonized, model).z
        assert np.all(zn[hc].mean(0) > 0.5)  # controls pushed up by the unfiltered pathology

    def test_oracle_mask_beats_no_filtering_at_half_pathology(self, rng):
        tax = FeatureTaxonomy.default()
        ref = _generative(400, tax, rng)
        model = fit_normative_model(ref)
        truth, biased = self._shifted_site(rng, tax, model)
        ref_std = reference_std(ref)
        oracle = pairwise_harmonize(biased, filter=FilterSpec.parse("oracle_hc"), model=model)
        none = pairwise_harmonize(biased, model=model)
        assert (std_mae(oracle.harmonized, truth, ref_std).mean
                < std_mae(none.harmonized, truth, ref_std).mean)
