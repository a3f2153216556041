import math

import numpy as np
import pytest
from scipy import stats

from robust_combat.data_model import HC, FeatureTaxonomy
from robust_combat.errors import ConfigError, InvalidRange, PoolExhausted
from robust_combat.evaluation import standardized_difference
from robust_combat.synth import (
    AD_LIKE,
    GRID_RATIOS,
    TBI_LIKE,
    PathologyProfile,
    augment,
    build_experiment_grid,
    generate_pool,
    n_pathological,
    sample_control_site,
    sample_site_effects,
    true_normative_model,
    vulnerable_bundles,
    write_grid,
)

from conftest import small_taxonomy


@pytest.fixture(scope="module")
def model():
    return true_normative_model()


@pytest.fixture(scope="module")
def pool(model):
    return generate_pool(model, 400, [AD_LIKE, TBI_LIKE], 150, seed=9)


def _residualized(ds, model):
    return (ds.features - model.expected(ds.covariates)) / model.sigma


def _mildest_bundle(profile, tax):
    mult = profile.bundle_multipliers(tax)
    return min(mult, key=mult.get), mult


class TestPathology:
    def test_null_profile_matches_controls(self, model):
        n = 1000
        ds = generate_pool(model, n, [PathologyProfile("NULL", {})], n, seed=1)
        z = _residualized(ds, model)
        sd = standardized_difference(z[~ds.is_hc], z[ds.is_hc])
        assert abs(sd.mean()) < 3 / math.sqrt(n)
        # per feature the two-sample sd of the estimate is about sqrt(2/n)
        assert np.abs(sd).max() < 5 * math.sqrt(2 / n)

    @pytest.mark.parametrize("profile,metric,target", [(AD_LIKE, "fw", 1.02),
                                                      (TBI_LIKE, "afd", -1.31)])
    def test_anchor_shift(self, model, profile, metric, target):
        # one feature at n = 1000 has a standard error near 0.05, so the
        # anchor is read off every affected bundle after removing its known multiplier
        tax = model.taxonomy
        ds = generate_pool(model, 1000, [profile], 1000, seed=2)
        bundle, mult = _mildest_bundle(profile, tax)
        assert mult[bundle] == 1.0
        z = _residualized(ds, model)
        per_bundle = [standardized_difference(z[~ds.is_hc, tax.index(b, metric)],
                                              z[ds.is_hc, tax.index(b, metric)]) / k
                      for b, k in mult.items()]
        assert abs(np.mean(per_bundle) - target) < 0.1
        assert abs(per_bundle[list(mult).index(bundle)] - target) < 4 * math.sqrt(2.1 / 1000)

    def test_generated_effect_sizes_match_profile(self, model):
        n = 1000
        ds = generate_pool(model, n, [AD_LIKE], n, seed=3)
        z = _residualized(ds, model)
        sd = standardized_difference(z[~ds.is_hc], z[ds.is_hc])
        shift = AD_LIKE.shift_vector(model.taxonomy)
        assert np.abs(sd - shift).max() < 0.25
        assert np.abs(sd - shift).mean() < 0.05

    def test_peak_bundle_exceeds_two_sd(self, model):
        shift = TBI_LIKE.shift_vector(model.taxonomy)
        assert shift.min() < -2.0
        assert np.count_nonzero(shift) == 10 * len(vulnerable_bundles(model.taxonomy))

    def test_signs_are_checked(self):
        tax = FeatureTaxonomy.default()
        with pytest.raises(ConfigError):
            PathologyProfile("BAD", {"fw": -0.5}).shift_vector(tax)
        with pytest.raises(ConfigError):
            PathologyProfile("BAD", {"AC__afd": 0.5}).shift_vector(tax)

    def test_feature_key_overrides(self):
        tax = FeatureTaxonomy.default()
        v = PathologyProfile("X", {"AC__fa": -3.0}).shift_vector(tax)
        assert v[tax.index("AC", "fa")] == -3.0
        assert np.count_nonzero(v) == 1

    def test_healthy_features_are_standard_normal(self):
        tax = small_taxonomy()
        model = true_normative_model(tax)
        n = 10_000
        z = _residualized(generate_pool(model, n, seed=4), model)
        critical = 1.628 / math.sqrt(n)  # asymptotic 1% two-sided KS value
        for v in range(tax.n_features):
            assert stats.kstest(z[:, v], "norm").statistic < critical


class TestControlSites:
    def test_half_and_half(self, pool):
        site = sample_control_site(pool, 100, 0.5, seed=1)
        assert site.n_subjects == 100
        assert int(site.is_hc.sum()) == 50

    def test_three_percent(self, pool):
        site = sample_control_site(pool, 100, 0.03, seed=1)
        assert int((~site.is_hc).sum()) == 3

    def test_ratio_zero(self, pool):
        assert sample_control_site(pool, 100, 0.0, seed=1).is_hc.all()

    def test_rounding(self):
        assert n_pathological(20, 0.8) == 16
        assert n_pathological(60, 0.5) == 30
        assert n_pathological(100, 0.03) == 3

    def test_no_duplicates_and_mixed_labels(self, pool):
        site = sample_control_site(pool, 100, 0.8, seed=5)
        assert len(set(site.subject_ids)) == 100
        labels = {g for g in site.groups if g != HC}
        assert labels == {"AD", "TBI"}

    def test_deterministic(self, pool):
        a = sample_control_site(pool, 50, 0.3, seed=8)
        b = sample_control_site(pool, 50, 0.3, seed=8)
        assert a.equals(b)

    def test_pool_exhausted(self, model):
        small = generate_pool(model, 10, [AD_LIKE], 5, seed=1)
        with pytest.raises(PoolExhausted):
            sample_control_site(small, 30, 0.1)
        with pytest.raises(PoolExhausted):
            sample_control_site(small, 12, 0.5)

    def test_invalid_ratio(self, pool):
        with pytest.raises(InvalidRange):
            sample_control_site(pool, 100, 1.0)


class TestSiteEffects:
    def test_neutral(self, model):
        eff = sample_site_effects(model, 0.0, (1.0, 1.0), seed=1)
        np.testing.assert_array_equal(eff.gamma, 0)
        np.testing.assert_array_equal(eff.delta, 1)

    def test_moments_of_many_draws(self, model):
        draws = [sample_site_effects(model, seed=s) for s in range(233)]  # 233 * 430 > 1e5
        g = np.concatenate([d.gamma / model.sigma for d in draws])
        d = np.concatenate([d.delta for d in draws])
        n = g.size
        assert n >= 100_000
        assert abs(g.mean()) < 4 * 0.5 / math.sqrt(n)
        assert abs(g.var() - 0.25) < 4 * 0.25 * math.sqrt(2 / n)
        assert abs(d.mean() - 1.05) < 4 * math.sqrt(0.7 ** 2 / 12 / n)
        assert abs(d.var() - 0.7 ** 2 / 12) < 0.01 * 0.7 ** 2 / 12 * 4
        assert d.min() >= 0.7 and d.max() <= 1.4

    @pytest.mark.parametrize("kw", [{"delta_range": (0.0, 1.0)}, {"delta_range": (1.4, 0.7)},
                                    {"gamma_scale": -1.0}])
    def test_invalid(self, model, kw):
        with pytest.raises(InvalidRange):
            sample_site_effects(model, **kw)


class TestAugment:
    def test_zero_noise_duplicates(self, pool):
        aug = augment(pool.subset(np.arange(10)), noise_scale=0.0, factor=3)
        assert aug.n_subjects == 30
        np.testing.assert_array_equal(aug.features[10:20], aug.features[:10])
        np.testing.assert_array_equal(aug.features[20:], aug.features[:10])
        assert aug.subject_ids[10].endswith("~aug1")
        assert list(aug.groups[10:20]) == list(aug.groups[:10])
        np.testing.assert_array_equal(aug.covariates[20:], aug.covariates[:10])

    def test_variance_addition(self):
        tax = small_taxonomy()
        model = true_normative_model(tax)
        ds = generate_pool(model, 20_000, seed=6)
        sigma = ds.features.std(0, ddof=1)
        aug = augment(ds, noise_scale=0.5, factor=2, seed=7)
        copies = aug.features[ds.n_subjects:]
        extra = copies.var(0, ddof=1) - ds.features.var(0, ddof=1)
        np.testing.assert_allclose(extra / sigma ** 2, 0.25, atol=0.04)


class TestGrid:
    def test_default_grid_has_240_sites(self, model):
        big = generate_pool(model, 200, [AD_LIKE, TBI_LIKE], 60, seed=2)
        grid = build_experiment_grid(big, model)
        assert len(grid) == 240
        assert [g.ratio for g in grid[::40]] == list(GRID_RATIOS)
        assert len({g.site_id for g in grid}) == 240

    def test_single_cell(self, pool, model):
        grid = build_experiment_grid(pool, model, [0.5], sites_per_ratio=1)
        assert len(grid) == 1
        g = grid[0]
        assert g.biased.subject_ids == g.truth.subject_ids
        assert sum(g.profile_mix.values()) == 50

    def test_bias_inverts_exactly(self, pool, model):
        for g in build_experiment_grid(pool, model, [0.3, 0.8], sites_per_ratio=3, seed=4):
            expected = model.expected(g.truth.covariates)
            np.testing.assert_allclose(
                g.biased.features, expected + g.effects.gamma
                + g.effects.delta * (g.truth.features - expected), rtol=1e-14, atol=1e-14)
            recovered = expected + (g.biased.features - expected - g.effects.gamma) \
                / g.effects.delta
            np.testing.assert_allclose(recovered, g.truth.features, rtol=1e-12, atol=1e-13)

    def test_reproducible(self, pool, model):
        a = build_experiment_grid(pool, model, [0.1, 0.7], 2, seed=11)
        b = build_experiment_grid(pool, model, [0.1, 0.7], 2, seed=11)
        for x, y in zip(a, b):
            assert x.biased.features.tobytes() == y.biased.features.tobytes()
            assert x.truth.equals(y.truth)
        c = build_experiment_grid(pool, model, [0.1, 0.7], 2, seed=12)
        assert not np.array_equal(a[0].biased.features, c[0].biased.features)

    def test_adding_cells_keeps_existing(self, pool, model):
        a = build_experiment_grid(pool, model, [0.1], 2, seed=3)
        b = build_experiment_grid(pool, model, [0.1], 4, seed=3)
        assert a[0].truth.equals(b[0].truth)

    def test_manifest(self, tmp_path, pool, model):
        grid = build_experiment_grid(pool, model, [0.5], 2, seed=1)
        path = write_grid(grid, tmp_path, master_seed=1, config_hash="abc")
        first = path.read_bytes()
        write_grid(grid, tmp_path, master_seed=1, config_hash="abc")
        assert path.read_bytes() == first
        import json
        m = json.loads(first)
        assert m["n_sites"] == 2
        assert (tmp_path / m["sites"][0]["biased"]).exists()
        assert (tmp_path / m["sites"][0]["truth"]).exists()


def test_unknown_profile_key():
    with pytest.raises(ConfigError):
        PathologyProfile("X", {"nope": 1.0}).shift_vector(FeatureTaxonomy.default())
