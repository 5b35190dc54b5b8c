import numpy as np
import pytest

from bigbatch.analysis import (
    AnalysisError,
    SamplerSpec,
    drift_scale,
    estimate_grad_variance,
    normal_pair_sampler,
    posneg_ratio_study,
    scalar_linear_grad,
    variance_equivalence_ratio,
)

HEAVY_POS = ((0, 0.25), (1, 0.35), (3, 0.25), (12, 0.12), (40, 0.03))
NEGS = ((96, 0.5), (128, 0.5))


class TestScalarModel:
    def test_gradient_formula(self):
        # d/dw (w*x - y)^2 / 2 at w=0 is -x*y, averaged over the batch.
        g = scalar_linear_grad((np.array([2.0, 0.0]), np.array([3.0, 5.0])))
        assert g["w"] == -3.0

    def test_sampler_shapes(self):
        x, y = normal_pair_sampler(np.random.default_rng(0), 7)
        assert x.shape == (7,) and y.shape == (7,)


class TestEstimateGradVariance:
    def test_requires_enough_trials(self):
        with pytest.raises(AnalysisError, match="trials"):
            estimate_grad_variance(scalar_linear_grad, normal_pair_sampler, 4, 50, 0)

    def test_requires_positive_batch(self):
        with pytest.raises(AnalysisError, match="batch_size"):
            estimate_grad_variance(scalar_linear_grad, normal_pair_sampler, 0, 200, 0)

    def test_constant_sampler_has_zero_variance(self):
        fixed = (np.ones(3), np.ones(3))
        rep = estimate_grad_variance(scalar_linear_grad, lambda rng, n: fixed, 3, 150, 1)
        assert rep.aggregate == 0.0
        assert rep.ci_half_width == 0.0

    def test_matches_closed_form_one_over_n(self):
        # Var of the per-sample gradient is exactly 1; a batch of N averages
        # it down to 1/N.
        rep = estimate_grad_variance(scalar_linear_grad, normal_pair_sampler,
                                     batch_size=4, trials=800, seed=3)
        assert abs(rep.aggregate - 0.25) < max(4 * rep.ci_half_width, 0.03)
        assert rep.ci_half_width < 0.05

    def test_one_over_n_scaling_between_sizes(self):
        r1 = estimate_grad_variance(scalar_linear_grad, normal_pair_sampler, 2, 600, 4)
        r2 = estimate_grad_variance(scalar_linear_grad, normal_pair_sampler, 8, 600, 4)
        assert 0.8 < (r1.aggregate / r2.aggregate) / 4.0 < 1.25

    def test_deterministic(self):
        a = estimate_grad_variance(scalar_linear_grad, normal_pair_sampler, 4, 150, 9)
        b = estimate_grad_variance(scalar_linear_grad, normal_pair_sampler, 4, 150, 9)
        assert a.as_dict() == b.as_dict()

    def test_vector_blocks(self):
        # Two parameter blocks; each coordinate is an independent mean of N
        # standard normals, so every block variance sits near 1/N.
        def grad_fn(batch):
            return {"a": batch[:, :2].mean(axis=0), "b": batch[:, 2:].mean(axis=0)}

        rep = estimate_grad_variance(
            grad_fn, lambda rng, n: rng.standard_normal((n, 5)),
            batch_size=8, trials=600, seed=5)
        assert set(rep.block_variance) == {"a", "b"}
        for v in rep.block_variance.values():
            assert abs(v - 1 / 8) < 0.02
        assert abs(rep.aggregate - 1 / 8) < 0.02


class TestEquivalenceRatio:
    def test_scaled_ratio_near_one(self):
        rep = variance_equivalence_ratio(scalar_linear_grad, normal_pair_sampler,
                                         batch_size=8, k=2, rate=0.02,
                                         trials=400, seed=0, scaled=True)
        assert 0.8 < rep.ratio < 1.25
        assert rep.scaled is True

    def test_unscaled_ratio_near_inverse_k_squared(self):
        rep = variance_equivalence_ratio(scalar_linear_grad, normal_pair_sampler,
                                         batch_size=8, k=2, rate=0.02,
                                         trials=400, seed=0, scaled=False)
        assert 0.8 < rep.ratio * 4.0 < 1.25

    def test_scaled_and_unscaled_differ_by_exactly_k_squared(self):
        # Same seed means identical gradient draws; the two runs differ only
        # in the constant multiplying the large-batch side.
        a = variance_equivalence_ratio(scalar_linear_grad, normal_pair_sampler,
                                       8, 4, 0.02, 200, 7, scaled=True)
        b = variance_equivalence_ratio(scalar_linear_grad, normal_pair_sampler,
                                       8, 4, 0.02, 200, 7, scaled=False)
        assert abs(a.ratio / b.ratio - 16.0) < 1e-9
        assert a.var_small == b.var_small

    def test_k_one_sanity(self):
        rep = variance_equivalence_ratio(scalar_linear_grad, normal_pair_sampler,
                                         batch_size=16, k=1, rate=0.1,
                                         trials=400, seed=2)
        assert 0.7 < rep.ratio < 1.4

    def test_degenerate_sampler_rejected(self):
        fixed = (np.ones(4), np.ones(4))
        with pytest.raises(AnalysisError, match="degenerate"):
            variance_equivalence_ratio(scalar_linear_grad, lambda rng, n: fixed,
                                       4, 2, 0.02, 150, 0)

    def test_bad_k(self):
        with pytest.raises(AnalysisError, match="k must be"):
            variance_equivalence_ratio(scalar_linear_grad, normal_pair_sampler,
                                       4, 0, 0.02, 150, 0)

    def test_deterministic(self):
        a = variance_equivalence_ratio(scalar_linear_grad, normal_pair_sampler,
                                       4, 2, 0.02, 150, 11)
        b = variance_equivalence_ratio(scalar_linear_grad, normal_pair_sampler,
                                       4, 2, 0.02, 150, 11)
        assert a.as_dict() == b.as_dict()


class TestSamplerSpec:
    def base(self, **kw):
        args = dict(pos_counts=HEAVY_POS, neg_counts=NEGS, batch_sizes=(16,),
                    epochs=1, batches_per_cell=10, seed=0)
        args.update(kw)
        return SamplerSpec(**args)

    def test_valid(self):
        spec = self.base()
        assert spec.batch_sizes == (16,)

    def test_empty_mixture(self):
        with pytest.raises(AnalysisError):
            self.base(pos_counts=())

    def test_probs_must_sum_to_one(self):
        with pytest.raises(AnalysisError, match="sum to 1"):
            self.base(pos_counts=((1, 0.4), (2, 0.4)))

    def test_counts_must_be_integers(self):
        with pytest.raises(AnalysisError, match="integers"):
            self.base(pos_counts=((1.5, 1.0),))

    def test_negatives_at_least_one_per_image(self):
        with pytest.raises(AnalysisError):
            self.base(neg_counts=((0, 1.0),))

    def test_positive_counts_nonnegative(self):
        with pytest.raises(AnalysisError):
            self.base(pos_counts=((-1, 1.0),))

    def test_drift_scales_in_unit_interval(self):
        with pytest.raises(AnalysisError, match="drift_early_scale"):
            self.base(drift_early_scale=0.0)
        with pytest.raises(AnalysisError, match="drift_late_scale"):
            self.base(drift_late_scale=1.5)

    def test_drift_rate_nonnegative(self):
        with pytest.raises(AnalysisError, match="drift_rate"):
            self.base(drift_rate=-0.5)

    def test_structure_bounds(self):
        with pytest.raises(AnalysisError):
            self.base(epochs=0)
        with pytest.raises(AnalysisError):
            self.base(batches_per_cell=0)
        with pytest.raises(AnalysisError):
            self.base(batch_sizes=())
        with pytest.raises(AnalysisError):
            self.base(batch_sizes=(0,))


class TestDriftScale:
    def spec(self, **kw):
        args = dict(pos_counts=HEAVY_POS, neg_counts=NEGS,
                    batch_sizes=(16, 256), epochs=4, batches_per_cell=10, seed=0,
                    drift_early_scale=0.3, drift_late_scale=1.0, drift_rate=0.6,
                    drift_batch_exponent=0.5)
        args.update(kw)
        return SamplerSpec(**args)

    def test_zero_rate_stays_early(self):
        spec = self.spec(drift_rate=0.0)
        assert drift_scale(spec, 0, 16) == 0.3
        assert drift_scale(spec, 3, 256) == 0.3

    def test_approaches_late_scale(self):
        spec = self.spec()
        assert drift_scale(spec, 100, 256) == pytest.approx(1.0, abs=1e-9)

    def test_monotone_in_epoch_and_batch(self):
        spec = self.spec()
        assert drift_scale(spec, 0, 16) < drift_scale(spec, 1, 16)
        assert drift_scale(spec, 0, 16) < drift_scale(spec, 0, 256)

    def test_visible_within_first_epoch(self):
        spec = self.spec()
        assert drift_scale(spec, 0, 16) > spec.drift_early_scale


class TestRatioStudy:
    def test_point_mass_counts_have_zero_spread(self):
        spec = SamplerSpec(pos_counts=((2, 1.0),), neg_counts=((64, 1.0),),
                           batch_sizes=(8, 32), epochs=2, batches_per_cell=40, seed=3)
        for cell in posneg_ratio_study(spec):
            assert cell.mean_ratio_pct == 100.0 * 2 / 64
            assert cell.std_ratio_pct == 0.0
            assert cell.std_pos_frac_pct == 0.0
            assert cell.zero_positive_batches == 0

    def test_all_zero_positives_is_well_defined(self):
        spec = SamplerSpec(pos_counts=((0, 1.0),), neg_counts=((10, 1.0),),
                           batch_sizes=(4,), epochs=1, batches_per_cell=25, seed=4)
        (cell,) = posneg_ratio_study(spec)
        assert cell.mean_ratio_pct == 0.0
        assert cell.zero_positive_batches == 25

    def test_iid_std_shrinks_with_batch_size(self):
        spec = SamplerSpec(pos_counts=HEAVY_POS, neg_counts=NEGS,
                           batch_sizes=(16, 256), epochs=1,
                           batches_per_cell=400, seed=11)
        c16, c256 = posneg_ratio_study(spec)
        ratio = c16.std_ratio_pct / c256.std_ratio_pct
        assert 3.0 < ratio < 5.5  # CLT predicts sqrt(256/16) = 4

    def test_iid_mean_matches_population_ratio(self):
        # E[pos]/E[neg] = 3.74 / 112 for the heavy-tailed mixture.
        spec = SamplerSpec(pos_counts=HEAVY_POS, neg_counts=NEGS,
                           batch_sizes=(256,), epochs=1,
                           batches_per_cell=400, seed=12)
        (cell,) = posneg_ratio_study(spec)
        assert cell.mean_ratio_pct == pytest.approx(100 * 3.74 / 112, rel=0.05)

    def test_drift_makes_epoch_zero_monotone_in_batch(self):
        spec = SamplerSpec(pos_counts=HEAVY_POS, neg_counts=NEGS,
                           batch_sizes=(16, 32, 64, 128, 256), epochs=2,
                           batches_per_cell=400, seed=7,
                           drift_early_scale=0.3, drift_late_scale=1.0,
                           drift_rate=0.6, drift_batch_exponent=0.5)
        cells = posneg_ratio_study(spec)
        for epoch in (0, 1):
            means = [c.mean_ratio_pct for c in cells if c.epoch == epoch]
            assert all(a < b for a, b in zip(means, means[1:]))

    def test_later_epochs_approach_undrifted_mean(self):
        spec = SamplerSpec(pos_counts=HEAVY_POS, neg_counts=NEGS,
                           batch_sizes=(128,), epochs=8,
                           batches_per_cell=300, seed=8,
                           drift_early_scale=0.3, drift_late_scale=1.0,
                           drift_rate=0.6, drift_batch_exponent=0.5)
        cells = posneg_ratio_study(spec)
        assert cells[0].mean_ratio_pct < cells[-1].mean_ratio_pct
        assert cells[-1].mean_ratio_pct == pytest.approx(100 * 3.74 / 112, rel=0.08)

    def test_deterministic(self):
        spec = SamplerSpec(pos_counts=HEAVY_POS, neg_counts=NEGS,
                           batch_sizes=(16, 64), epochs=2, batches_per_cell=50, seed=9)
        a = [c.as_dict() for c in posneg_ratio_study(spec)]
        b = [c.as_dict() for c in posneg_ratio_study(spec)]
        assert a == b

    def test_cell_dict_keys(self):
        spec = SamplerSpec(pos_counts=((1, 1.0),), neg_counts=((4, 1.0),),
                           batch_sizes=(2,), epochs=1, batches_per_cell=5, seed=0)
        (cell,) = posneg_ratio_study(spec)
        assert set(cell.as_dict()) == {
            "epoch", "batch_size", "mean_ratio_pct", "std_ratio_pct",
            "mean_pos_frac_pct", "std_pos_frac_pct", "zero_positive_batches",
        }
