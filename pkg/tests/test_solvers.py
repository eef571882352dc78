import numpy as np
import pytest

from cmr import (
    CmrError,
    CmrParams,
    FitConfig,
    MultiSiteDataset,
    SingularSystemError,
    SiteDataset,
    SynthSpec,
    fit_als,
    fit_gd,
    generate,
    objective,
    predict,
    spectral_init,
    sq_correlation,
    update_v,
    update_w,
)
from oracles import ridge_solve_inv


def site_from_design(rows, y, site_id="a"):
    """Build a B=1 site whose v-step design matrix equals ``rows``."""
    rows = np.asarray(rows, dtype=float)
    X = rows[:, None, :]  # (T, 1, P): with w = [1], X_t^T w = rows[t]
    return SiteDataset(site_id, y, X)


class TestUpdateV:
    def test_exactly_determined(self):
        site = site_from_design(np.eye(2), [3.0, 4.0])
        v = update_v(np.array([1.0]), site, 0.0)
        assert np.allclose(v, [3.0, 4.0], rtol=1e-12)

    def test_ridge_shrinkage(self):
        site = site_from_design(np.eye(2), [2.0, 2.0])
        v = update_v(np.array([1.0]), site, 1.0)
        assert np.allclose(v, [1.0, 1.0], rtol=1e-12)

    def test_matches_explicit_inverse_oracle(self):
        rng = np.random.default_rng(61)
        w = rng.standard_normal(4)
        w /= np.linalg.norm(w)
        X = rng.standard_normal((8, 4, 3))
        y = rng.standard_normal(8)
        site = SiteDataset("a", y, X)
        A = np.array([X[t].T @ w for t in range(8)])
        expected = ridge_solve_inv(A, y, 0.1)
        assert np.allclose(update_v(w, site, 0.1), expected, rtol=1e-10, atol=1e-12)

    def test_underdetermined_advises_ridge(self):
        rng = np.random.default_rng(3)
        site = SiteDataset("a", rng.standard_normal(2), rng.standard_normal((2, 3, 5)))
        w = np.zeros(3)
        w[0] = 1.0
        with pytest.raises(SingularSystemError, match="lam > 0"):
            update_v(w, site, 0.0)

    def test_requires_unit_w(self):
        site = site_from_design(np.eye(2), [1.0, 1.0])
        with pytest.raises(CmrError, match="unit-norm"):
            update_v(np.array([2.0]), site, 0.0)


class TestUpdateW:
    def test_diagonal_normal_equations(self):
        # B=2, P=1: X_t v gives collapsed rows (1,0) and (0,1); y = (2,0).
        X = np.array([[[1.0], [0.0]], [[0.0], [1.0]]])
        site = SiteDataset("a", [2.0, 0.0], X)
        data = MultiSiteDataset((site,))
        params = CmrParams(w=[1.0, 0.0], v={"a": [1.0]})
        w, scale = update_w(params, data)
        assert np.allclose(w, [1.0, 0.0], atol=1e-12)
        assert scale == pytest.approx(2.0, rel=1e-12)

    def test_exact_recovery_with_true_v(self):
        data, truth = generate(SynthSpec(num_sites=6, num_samples=8, num_bands=4,
                                         num_pixels=3, seed=5))
        params = truth.as_params()
        w, _ = update_w(params, data)
        assert sq_correlation(w, truth.w_true) == pytest.approx(1.0, abs=1e-9)

    def test_matches_explicit_inverse_oracle(self):
        rng = np.random.default_rng(62)
        sites = []
        v = {}
        for i in range(4):
            X = rng.standard_normal((6, 3, 2))
            y = rng.standard_normal(6)
            sites.append(SiteDataset(f"s{i}", y, X))
            v[f"s{i}"] = rng.standard_normal(2)
        data = MultiSiteDataset(tuple(sites))
        params = CmrParams(w=[1.0, 0.0, 0.0], v=v)
        rows = np.concatenate(
            [[s.features[t] @ v[s.site_id] for t in range(6)] for s in data.sites]
        )
        y_all = np.concatenate([s.labels for s in data.sites])
        expected = ridge_solve_inv(rows, y_all, 0.0)
        w, scale = update_w(params, data)
        assert np.allclose(w * scale, expected, rtol=1e-10, atol=1e-12)

    def test_singular_reports_deficient_directions(self):
        # One site, one sample: rank-1 Gram in a 3-band space.
        rng = np.random.default_rng(8)
        site = SiteDataset("a", [1.0], rng.standard_normal((1, 3, 2)))
        params = CmrParams(w=[1.0, 0.0, 0.0], v={"a": [0.4, -0.2]})
        with pytest.raises(SingularSystemError, match="2 deficient"):
            update_w(params, MultiSiteDataset((site,)))

    def test_prediction_invariance_of_renormalization(self):
        data, _ = generate(SynthSpec(num_sites=5, num_samples=7, num_bands=4,
                                     num_pixels=3, seed=9))
        rng = np.random.default_rng(10)
        v = {s.site_id: rng.standard_normal(3) for s in data.sites}
        params = CmrParams(w=[1.0, 0.0, 0.0, 0.0], v=v)
        w_unit, scale = update_w(params, data)
        w_hat = w_unit * scale
        for site in data.sites:
            for t in range(site.num_samples):
                before = predict(w_hat, site.features[t], v[site.site_id])
                after = predict(w_unit, site.features[t], scale * v[site.site_id])
                assert after == pytest.approx(before, rel=1e-12, abs=1e-13)


class TestFitAls:
    def test_recovers_truth(self):
        data, truth = generate(SynthSpec(num_sites=50, num_samples=15, num_bands=20,
                                         num_pixels=10, seed=42))
        result = fit_als(data, FitConfig(lam=1e-3, seed=0))
        assert sq_correlation(result.params.w, truth.w_true) >= 0.99
        assert result.converged

    def test_zero_labels_converge_to_zero(self):
        # Spectral init on all-zero labels correctly errors (zero Q), so
        # start from the random-sphere arm.
        rng = np.random.default_rng(12)
        sites = tuple(
            SiteDataset(f"s{i}", np.zeros(4), rng.standard_normal((4, 3, 2)))
            for i in range(3)
        )
        result = fit_als(MultiSiteDataset(sites), FitConfig(lam=0.5, init="random"))
        assert result.converged
        assert result.iterations == 1
        assert result.objective_trace[-1] == 0.0
        for vec in result.params.v.values():
            assert np.allclose(vec, 0.0)

    def test_zero_labels_spectral_init_propagates_error(self):
        rng = np.random.default_rng(12)
        sites = (SiteDataset("a", np.zeros(4), rng.standard_normal((4, 3, 2))),)
        with pytest.raises(CmrError, match="zero matrix"):
            fit_als(MultiSiteDataset(sites), FitConfig(lam=0.5, init="spectral"))

    def test_trace_non_increasing_unregularized(self):
        data, _ = generate(SynthSpec(num_sites=5, num_samples=9, num_bands=4,
                                     num_pixels=3, seed=13))
        result = fit_als(data, FitConfig(lam=0.0))
        trace = np.array(result.objective_trace)
        assert np.all(trace[1:] <= trace[:-1] + 1e-10 * np.maximum(1.0, trace[:-1]))

    def test_regularized_final_not_above_first(self):
        data, _ = generate(SynthSpec(num_sites=6, num_samples=8, num_bands=4,
                                     num_pixels=3, noise_sigma=0.3, seed=14))
        result = fit_als(data, FitConfig(lam=0.2))
        assert result.objective_trace[-1] <= result.objective_trace[0]

    def test_final_trace_matches_objective(self):
        data, _ = generate(SynthSpec(num_sites=4, num_samples=6, num_bands=3,
                                     num_pixels=2, noise_sigma=0.1, seed=15))
        config = FitConfig(lam=0.05)
        result = fit_als(data, config)
        recomputed = objective(result.params, data, config.lam)
        assert result.objective_trace[-1] == pytest.approx(recomputed, rel=1e-9)
        assert abs(np.linalg.norm(result.params.w) - 1.0) < 1e-9

    def test_converged_means_small_last_step(self):
        data, _ = generate(SynthSpec(num_sites=4, num_samples=6, num_bands=3,
                                     num_pixels=2, seed=16))
        config = FitConfig(lam=1e-3)
        result = fit_als(data, config)
        assert result.converged
        prev, last = result.objective_trace[-2], result.objective_trace[-1]
        assert abs(prev - last) <= config.tol_rel_objective * max(1.0, abs(prev))

    def test_v_step_is_blockwise_optimal(self):
        data, _ = generate(SynthSpec(num_sites=3, num_samples=8, num_bands=4,
                                     num_pixels=3, noise_sigma=0.5, seed=18))
        lam = 0.1
        result = fit_als(data, FitConfig(lam=lam, max_iters=3))
        w = result.params.w
        for site in data.sites:
            v_opt = update_v(w, site, lam)
            base = _site_terms(w, v_opt, site, lam)
            for k in range(len(v_opt)):
                for delta in (1e-4, -1e-4):
                    v_pert = v_opt.copy()
                    v_pert[k] += delta
                    assert _site_terms(w, v_pert, site, lam) >= base - 1e-12

    def test_sign_symmetry_of_start(self):
        data, truth = generate(SynthSpec(num_sites=30, num_samples=10, num_bands=8,
                                         num_pixels=4, seed=19))
        w0 = spectral_init(data).w0
        config = FitConfig(lam=1e-3)
        corr_pos = sq_correlation(fit_als(data, config, w_start=w0).params.w,
                                  truth.w_true)
        corr_neg = sq_correlation(fit_als(data, config, w_start=-w0).params.w,
                                  truth.w_true)
        assert corr_neg == pytest.approx(corr_pos, abs=1e-6)

    def test_divergence_guard_is_reachable_code(self):
        # Healthy fits stay finite; just exercise the happy path type.
        data, _ = generate(SynthSpec(num_sites=2, num_samples=5, num_bands=3,
                                     num_pixels=2, seed=20))
        result = fit_als(data, FitConfig(lam=1e-3))
        assert np.isfinite(result.objective_trace).all()

    def test_sweep_v_step_matches_per_site_op(self):
        # The batched sweep kernel (including its dual form for T < P) must
        # agree with the public per-site ridge step.
        from cmr import _stacked
        from cmr.solvers import _ridge_v_rows

        for T, P, lam in ((4, 10, 1e-3), (12, 3, 0.05), (6, 6, 0.0)):
            data, _ = generate(SynthSpec(num_sites=20, num_samples=T, num_bands=5,
                                         num_pixels=P, seed=26))
            w0 = spectral_init(data).w0
            batched = _ridge_v_rows(_stacked.stack(data), w0, lam)
            per_site = np.stack([update_v(w0, s, lam) for s in data.sites])
            assert np.allclose(batched, per_site, rtol=1e-8, atol=1e-10)


def _site_terms(w, v, site, lam):
    pred = np.einsum("tbp,b->tp", site.features, w) @ v
    r = site.labels - pred
    return float(r @ r) + lam * float(v @ v)


class TestFitGd:
    def test_stationary_start_converges_immediately(self):
        data, truth = generate(SynthSpec(num_sites=4, num_samples=8, num_bands=3,
                                         num_pixels=2, seed=21))
        config = FitConfig(lam=0.0, solver="gd")
        result = fit_gd(data, config, w_start=truth.w_true)
        assert result.converged
        assert result.iterations == 1
        assert result.objective_trace[-1] <= 1e-20

    def test_trace_strictly_decreasing_until_convergence(self):
        data, _ = generate(SynthSpec(num_sites=4, num_samples=10, num_bands=4,
                                     num_pixels=2, noise_sigma=0.4, seed=22))
        result = fit_gd(data, FitConfig(lam=0.05, solver="gd", max_iters=200))
        trace = np.array(result.objective_trace)
        assert np.all(np.diff(trace)[:-1] < 0)

    def test_unit_norm_every_iteration(self):
        data, _ = generate(SynthSpec(num_sites=4, num_samples=8, num_bands=5,
                                     num_pixels=3, noise_sigma=0.2, seed=23))
        norms = []
        fit_gd(
            data,
            FitConfig(lam=0.01, solver="gd", max_iters=50),
            callback=lambda it, params, f: norms.append(np.linalg.norm(params.w)),
        )
        assert norms
        assert np.max(np.abs(np.array(norms) - 1.0)) < 1e-12

    def test_agrees_with_als_on_shared_instance(self):
        data, truth = generate(SynthSpec(num_sites=200, num_samples=15, num_bands=20,
                                         num_pixels=10, seed=24))
        w0 = spectral_init(data).w0
        als = fit_als(data, FitConfig(lam=1e-3), w_start=w0)
        gd = fit_gd(data, FitConfig(lam=1e-3, solver="gd", max_iters=1500),
                    w_start=w0)
        assert sq_correlation(als.params.w, truth.w_true) >= 0.99
        assert sq_correlation(gd.params.w, truth.w_true) >= 0.99
        assert gd.objective_trace[-1] < gd.objective_trace[0]

    def test_final_trace_matches_objective(self):
        data, _ = generate(SynthSpec(num_sites=3, num_samples=7, num_bands=3,
                                     num_pixels=2, noise_sigma=0.3, seed=25))
        config = FitConfig(lam=0.02, solver="gd", max_iters=100)
        result = fit_gd(data, config)
        recomputed = objective(result.params, data, config.lam)
        assert result.objective_trace[-1] == pytest.approx(recomputed, rel=1e-9)
