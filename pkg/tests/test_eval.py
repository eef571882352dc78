import numpy as np
import pytest

import cmr.evaluate as evaluate_mod
from cmr import (
    CmrError,
    FitConfig,
    SingularSystemError,
    SiteDataset,
    SynthSpec,
    crossval,
    fit_ndwi_site,
    fold_assignments,
    generate,
    ndwi_features,
    normalized_mse,
    predict_ndwi,
    sq_correlation,
    w_dist,
)
from oracles import ndwi_loop, normalized_mse_loop, ridge_intercept_solve_inv


class TestSqCorrelation:
    def test_identical(self):
        a = np.array([1.0, -2.0, 0.5])
        assert sq_correlation(a, a) == pytest.approx(1.0, rel=1e-12)

    def test_orthogonal(self):
        assert sq_correlation([1.0, 0.0], [0.0, 3.0]) == 0.0

    def test_sign_invariance(self):
        a = np.array([0.3, -1.2, 2.0])
        assert sq_correlation(a, -a) == pytest.approx(1.0, rel=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal(5), rng.standard_normal(5)
        base = sq_correlation(a, b)
        for c in (0.1, -7.0, 1e6):
            assert sq_correlation(c * a, b) == pytest.approx(base, rel=1e-12)

    def test_zero_vector_errors(self):
        with pytest.raises(CmrError, match="zero"):
            sq_correlation([0.0, 0.0], [1.0, 0.0])


class TestWDist:
    def test_identical_is_zero(self):
        a = np.array([0.6, 0.8])
        assert w_dist(a, a) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_is_one(self):
        assert w_dist([1.0, 0.0], [0.0, 1.0]) == 1.0

    def test_thirty_degrees(self):
        b = np.array([np.cos(np.pi / 6), np.sin(np.pi / 6)])
        assert w_dist([1.0, 0.0], b) == pytest.approx(0.5, rel=1e-12)

    def test_rejects_non_unit(self):
        with pytest.raises(CmrError, match="unit-norm"):
            w_dist([2.0, 0.0], [1.0, 0.0])

    def test_symmetry_and_corr_equivalence(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a = rng.standard_normal(4)
            a /= np.linalg.norm(a)
            b = rng.standard_normal(4)
            b /= np.linalg.norm(b)
            assert w_dist(a, b) == pytest.approx(w_dist(b, a), abs=1e-12)
            # dist^2 and 1 - corr^2 agree at the 1e-12 level; the sqrt
            # itself amplifies roundoff near zero distance.
            assert w_dist(a, b) ** 2 == pytest.approx(
                1.0 - sq_correlation(a, b), abs=1e-12
            )
        assert w_dist(a, a) ** 2 <= 1e-12
        assert sq_correlation(a, a) == pytest.approx(1.0, abs=1e-12)


class TestNdwiFeatures:
    def test_direct_value(self):
        X = np.array([[2.0], [1.0]])
        assert ndwi_features(X, 0, 1)[0] == pytest.approx(1.0 / 3.0, rel=1e-15)

    def test_equal_bands_zero(self):
        X = np.array([[3.0, -2.0], [3.0, -2.0]])
        assert np.array_equal(ndwi_features(X, 0, 1), [0.0, 0.0])

    def test_degenerate_denominator_zero(self):
        X = np.array([[1.5], [-1.5]])
        assert ndwi_features(X, 0, 1)[0] == 0.0

    def test_errors(self):
        X = np.ones((2, 3))
        with pytest.raises(CmrError, match="out of range"):
            ndwi_features(X, 0, 5)
        with pytest.raises(CmrError, match="differ"):
            ndwi_features(X, 1, 1)

    def test_bounded_for_positive_bands(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            X = rng.uniform(0.01, 10.0, (4, 6))
            vals = ndwi_features(X, 1, 2)
            assert np.all(vals >= -1.0) and np.all(vals <= 1.0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        X = rng.standard_normal((5, 8))
        assert np.allclose(ndwi_features(X, 1, 3), ndwi_loop(X, 1, 3),
                           rtol=1e-12, atol=1e-15)


def ndwi_site(rng, num_samples, num_pixels, site_id="a"):
    """Site with positive random bands so the index features are well-spread."""
    X = rng.uniform(0.5, 4.0, (num_samples, 3, num_pixels))
    y = rng.standard_normal(num_samples)
    return SiteDataset(site_id, y, X)


class TestFitNdwiSite:
    def test_square_interpolation_with_constant_labels(self):
        rng = np.random.default_rng(5)
        P = 3
        site = SiteDataset(
            "a",
            np.full(P + 1, 2.5),
            rng.uniform(0.5, 4.0, (P + 1, 2, P)),
        )
        model = fit_ndwi_site(site, 0, 1, lam=0.0)
        preds = predict_ndwi(model, site, 0, 1)
        assert np.allclose(preds, site.labels, rtol=1e-8, atol=1e-8)

    def test_huge_ridge_collapses_to_mean(self):
        rng = np.random.default_rng(6)
        site = ndwi_site(rng, 12, 4)
        model = fit_ndwi_site(site, 0, 1, lam=1e9)
        assert np.max(np.abs(model[:-1])) < 1e-6
        assert model[-1] == pytest.approx(site.labels.mean(), abs=1e-6)

    def test_matches_explicit_inverse_oracle(self):
        rng = np.random.default_rng(7)
        site = ndwi_site(rng, 12, 4)
        F = np.stack([ndwi_loop(site.features[t], 0, 1) for t in range(12)])
        expected = ridge_intercept_solve_inv(F, site.labels, 0.1)
        got = fit_ndwi_site(site, 0, 1, lam=0.1)
        assert np.allclose(got, expected, rtol=1e-10, atol=1e-12)

    def test_underdetermined_unregularized_errors(self):
        rng = np.random.default_rng(8)
        site = ndwi_site(rng, 2, 5)
        with pytest.raises(SingularSystemError, match="lam > 0"):
            fit_ndwi_site(site, 0, 1, lam=0.0)


class TestNormalizedMse:
    def test_perfect_predictions(self):
        assert normalized_mse([1.0, 2.0], [1.0, 2.0], 3.0) == 0.0

    def test_mean_predictor_gives_one(self):
        rng = np.random.default_rng(9)
        y = rng.standard_normal(50)
        preds = np.full(50, y.mean())
        assert normalized_mse(preds, y, float(np.var(y))) == pytest.approx(
            1.0, rel=1e-12
        )

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(10)
        preds, y = rng.standard_normal(20), rng.standard_normal(20)
        assert normalized_mse(preds, y, 0.7) == pytest.approx(
            normalized_mse_loop(preds, y, 0.7), rel=1e-12
        )

    def test_rejects_bad_normalizer(self):
        with pytest.raises(CmrError, match="normalizer"):
            normalized_mse([1.0], [1.0], 0.0)


class TestFoldAssignments:
    def test_partition_properties(self):
        data, _ = generate(SynthSpec(num_sites=3, num_samples=10, num_bands=3,
                                     num_pixels=2, seed=11))
        assignments = fold_assignments(data, folds=4, repeats=4, seed=0)
        assert len(assignments) == 4
        for per_fold in assignments:
            assert len(per_fold) == 4
            for site in data.sites:
                chunks = [per_fold[f][site.site_id] for f in range(4)]
                sizes = [len(c) for c in chunks]
                assert max(sizes) - min(sizes) <= 1
                joined = np.sort(np.concatenate(chunks))
                assert np.array_equal(joined, np.arange(site.num_samples))

    def test_deterministic(self):
        data, _ = generate(SynthSpec(num_sites=2, num_samples=8, num_bands=3,
                                     num_pixels=2, seed=12))
        a = fold_assignments(data, 3, 2, seed=5)
        b = fold_assignments(data, 3, 2, seed=5)
        for ra, rb in zip(a, b):
            for fa, fb in zip(ra, rb):
                for sid in fa:
                    assert np.array_equal(fa[sid], fb[sid])

    def test_too_few_samples_names_site(self):
        data, _ = generate(SynthSpec(num_sites=2, num_samples=3, num_bands=3,
                                     num_pixels=2, seed=13))
        with pytest.raises(CmrError, match="site_0000"):
            fold_assignments(data, folds=4, repeats=1, seed=0)


@pytest.fixture(scope="module")
def small_data():
    data, _ = generate(SynthSpec(num_sites=6, num_samples=24, num_bands=5,
                                 num_pixels=3, seed=14))
    return data


class TestCrossval:
    def test_shared_partitions_and_protocol(self, small_data, monkeypatch):
        calls = []
        original = evaluate_mod.fold_assignments

        def counting(*args, **kwargs):
            calls.append(args)
            return original(*args, **kwargs)

        monkeypatch.setattr(evaluate_mod, "fold_assignments", counting)
        config = FitConfig(lam=1e-3, seed=3)
        cmr_rep, ndwi_rep = crossval(small_data, 4, 4, config, (0, 1))
        # one assignment set drives both models
        assert len(calls) == 1
        assert cmr_rep.folds == ndwi_rep.folds == 4
        assert cmr_rep.repeats == ndwi_rep.repeats == 4
        assert cmr_rep.model_tag == "CMR" and ndwi_rep.model_tag == "NDWI"

    def test_deterministic_reports(self, small_data):
        config = FitConfig(lam=1e-3, seed=3)
        a = crossval(small_data, 3, 2, config, (0, 1))
        b = crossval(small_data, 3, 2, config, (0, 1))
        for ra, rb in zip(a, b):
            assert ra.aggregate == rb.aggregate
            assert ra.per_site_mse == rb.per_site_mse

    def test_aggregate_is_mean_of_sites(self, small_data):
        config = FitConfig(lam=1e-3, seed=4)
        cmr_rep, ndwi_rep = crossval(small_data, 3, 1, config, (0, 1))
        for rep in (cmr_rep, ndwi_rep):
            train = np.mean([v[0] for v in rep.per_site_mse.values()])
            test = np.mean([v[1] for v in rep.per_site_mse.values()])
            assert rep.aggregate[0] == pytest.approx(train, abs=1e-12)
            assert rep.aggregate[1] == pytest.approx(test, abs=1e-12)
            for tr, te in rep.per_site_mse.values():
                assert tr >= 0 and te >= 0 and np.isfinite((tr, te)).all()

    def test_cmr_beats_baseline_on_realizable_data(self, small_data):
        config = FitConfig(lam=1e-3, seed=5)
        cmr_rep, ndwi_rep = crossval(small_data, 4, 2, config, (0, 1))
        assert cmr_rep.aggregate[1] < ndwi_rep.aggregate[1]

    def test_workers_do_not_change_reports(self, small_data):
        config = FitConfig(lam=1e-3, seed=6)
        serial = crossval(small_data, 3, 1, config, (0, 1), workers=1)
        parallel = crossval(small_data, 3, 1, config, (0, 1), workers=2)
        for ra, rb in zip(serial, parallel):
            assert ra.aggregate == rb.aggregate
            assert ra.per_site_mse == rb.per_site_mse

    def test_rejects_bad_folds(self, small_data):
        with pytest.raises(CmrError):
            crossval(small_data, 1, 1, FitConfig(), (0, 1))
        with pytest.raises(CmrError):
            crossval(small_data, 3, 0, FitConfig(), (0, 1))
