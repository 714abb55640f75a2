"""Loss components, budget sampling, and annealing schedules."""

import math

import numpy as np
import pytest
import torch

from regionselect import objective, regions


def flat_partition(sizes):
    """1-row partition with the requested region sizes."""
    labels = np.concatenate([np.full(s, j) for j, s in enumerate(sizes)])
    return regions.partition_from_labels(labels[None, :])


class TestExpectedPixelFraction:
    def test_all_selected(self):
        p = flat_partition([25, 75])
        out = objective.expected_pixel_fraction(np.ones(2), p.region_sizes, 1, 100)
        assert float(out) == 1.0

    def test_none_selected(self):
        p = flat_partition([25, 75])
        out = objective.expected_pixel_fraction(np.zeros(2), p.region_sizes, 1, 100)
        assert float(out) == 0.0

    def test_size_weighted_mean(self):
        p = flat_partition([25, 75])
        out = objective.expected_pixel_fraction(
            np.array([1.0, 0.0]), p.region_sizes, 1, 100
        )
        assert float(out) == pytest.approx(0.25, abs=1e-12)

    def test_size_sum_mismatch_rejected(self):
        with pytest.raises(ValueError):
            objective.expected_pixel_fraction(np.ones(2), np.array([10, 10]), 1, 100)


class TestSparsityLoss:
    def test_zero_below_threshold(self):
        assert float(objective.sparsity_loss(0.3, 0.5)) == 0.0

    def test_zero_at_threshold_boundary(self):
        assert float(objective.sparsity_loss(0.5, 0.5)) == 0.0

    def test_value_above_threshold(self):
        out = float(objective.sparsity_loss(np.float64(0.8), 0.5))
        assert out == pytest.approx(-math.log(0.2), abs=1e-9)

    def test_zero_on_whole_budget_interval(self):
        for p_bar in np.linspace(0.0, 0.5, 21):
            assert float(objective.sparsity_loss(np.float64(p_bar), 0.5)) == 0.0

    def test_monotone_in_p_bar(self):
        values = [
            float(objective.sparsity_loss(np.float64(p), 0.3))
            for p in np.linspace(0, 1, 101)
        ]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_saturated_selection_stays_finite(self):
        out = float(objective.sparsity_loss(np.float64(1.0), 0.5))
        assert math.isfinite(out)
        assert out == pytest.approx(-math.log(1e-6), rel=1e-6)

    def test_gradient_through_pixel_fraction_matches_finite_differences(self):
        partition = flat_partition([30, 50, 20])
        sizes = torch.tensor([30.0, 50.0, 20.0], dtype=torch.float64)
        tau = 0.4
        rng = np.random.default_rng(0)
        for _ in range(20):
            p0 = rng.uniform(0.3, 0.95, size=3)

            def loss_at(p_np):
                p = torch.as_tensor(p_np, dtype=torch.float64)
                p_bar = objective.expected_pixel_fraction(p, sizes, 1, 100)
                return objective.sparsity_loss(p_bar, tau)

            p_bar0 = float((p0 * np.array([30, 50, 20])).sum() / 100)
            if p_bar0 <= tau + 1e-3:
                continue
            p = torch.as_tensor(p0, dtype=torch.float64).requires_grad_(True)
            p_bar = objective.expected_pixel_fraction(p, sizes, 1, 100)
            objective.sparsity_loss(p_bar, tau).backward()
            analytic = p.grad.numpy()
            h = 1e-6
            for j in range(3):
                up, down = p0.copy(), p0.copy()
                up[j] += h
                down[j] -= h
                numeric = (float(loss_at(up)) - float(loss_at(down))) / (2 * h)
                assert analytic[j] == pytest.approx(numeric, rel=1e-4)
        assert partition.region_count == 3


class TestCovariancePenalty:
    def test_zero_matrix(self):
        assert float(objective.covariance_penalty(np.zeros((4, 4)))) == 0.0

    def test_identity_matrix(self):
        assert float(objective.covariance_penalty(np.eye(6))) == 6.0

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(1)
        sigma = rng.normal(size=(3, 3))
        expected = sum(abs(sigma[i, j]) for i in range(3) for j in range(3))
        assert float(objective.covariance_penalty(sigma)) == pytest.approx(expected, abs=1e-12)


class TestTotalLoss:
    def schedule(self):
        return objective.TrainSchedule(lambda1=10.0, lambda2=0.01)

    def test_perfect_prediction_within_budget_is_zero(self):
        partition = flat_partition([50, 50])
        out = objective.total_loss(
            class_probs=np.array([0.0, 1.0, 0.0, 0.0]),
            label=1,
            p=np.array([0.2, 0.2]),
            sigma=np.zeros((2, 2)),
            partition=partition,
            tau=0.5,
            schedule=self.schedule(),
        )
        assert float(out.total) == 0.0

    def test_uniform_prediction_within_budget(self):
        partition = flat_partition([50, 50])
        out = objective.total_loss(
            class_probs=np.full(4, 0.25),
            label=2,
            p=np.array([0.1, 0.1]),
            sigma=np.zeros((2, 2)),
            partition=partition,
            tau=0.5,
            schedule=self.schedule(),
        )
        assert float(out.total) == pytest.approx(math.log(4.0), abs=1e-9)

    def test_worked_fixture_matches_independent_term_sum(self):
        # oracle: the three terms computed independently and then added
        nll = -math.log(0.25)                      # uniform over 4 classes
        sparsity = -math.log(1.0 - 0.8)            # p_bar = 0.8 over tau = 0.5
        cov = float(np.abs(np.eye(2)).sum())       # |I_2|_1 = 2
        expected = nll + 10.0 * sparsity + 0.01 * cov
        assert expected == pytest.approx(17.500673485460894, abs=1e-9)

        partition = flat_partition([50, 50])
        out = objective.total_loss(
            class_probs=np.full(4, 0.25),
            label=0,
            p=np.array([0.8, 0.8]),
            sigma=np.eye(2),
            partition=partition,
            tau=0.5,
            schedule=self.schedule(),
        )
        assert float(out.total) == pytest.approx(expected, abs=1e-9)

    def test_decomposition_identity_on_random_inputs(self):
        rng = np.random.default_rng(4)
        schedule = self.schedule()
        for _ in range(50):
            sizes = rng.integers(5, 40, size=4)
            partition = flat_partition(list(sizes))
            h, w = partition.shape
            probs = rng.dirichlet(np.ones(5))
            p = rng.uniform(0, 1, size=4)
            sigma = rng.normal(size=(4, 4))
            out = objective.total_loss(
                probs, int(rng.integers(5)), p, sigma, partition, 0.4, schedule
            )
            recomputed = (
                float(out.nll)
                + schedule.lambda1 * float(out.sparsity)
                + schedule.lambda2 * float(out.cov_penalty)
            )
            assert float(out.total) == pytest.approx(recomputed, abs=1e-9)

    def test_invariant_under_region_relabeling(self):
        rng = np.random.default_rng(5)
        sizes = [10, 20, 30, 40]
        partition = flat_partition(sizes)
        p = rng.uniform(0, 1, size=4)
        sigma = rng.normal(size=(4, 4))
        sigma = sigma @ sigma.T
        probs = rng.dirichlet(np.ones(3))
        base = objective.total_loss(probs, 1, p, sigma, partition, 0.3, self.schedule())

        perm = rng.permutation(4)
        inverse = np.argsort(perm)
        relabeled = regions.partition_from_labels(inverse[partition.labels])
        permuted = objective.total_loss(
            probs, 1, p[perm], sigma[np.ix_(perm, perm)], relabeled, 0.3, self.schedule()
        )
        for name in ("nll", "sparsity", "cov_penalty", "total", "p_bar"):
            assert float(getattr(base, name)) == pytest.approx(
                float(getattr(permuted, name)), abs=1e-12
            )

    def test_probability_floor_bounds_the_nll(self):
        partition = flat_partition([50, 50])
        out = objective.total_loss(
            class_probs=np.array([1.0, 0.0]),
            label=1,
            p=np.zeros(2),
            sigma=np.zeros((2, 2)),
            partition=partition,
            tau=0.5,
            schedule=self.schedule(),
        )
        assert float(out.nll) == pytest.approx(-math.log(1e-12), rel=1e-9)

    def test_bad_label_rejected(self):
        partition = flat_partition([50, 50])
        with pytest.raises(ValueError):
            objective.total_loss(
                np.full(4, 0.25), 7, np.zeros(2), np.zeros((2, 2)),
                partition, 0.5, self.schedule(),
            )

    def test_unnormalized_probabilities_rejected(self):
        partition = flat_partition([50, 50])
        with pytest.raises(ValueError):
            objective.total_loss(
                np.full(4, 0.3), 0, np.zeros(2), np.zeros((2, 2)),
                partition, 0.5, self.schedule(),
            )


class TestSampleTau:
    def test_degenerate_interval_is_constant(self):
        schedule = objective.TrainSchedule(tau_low=0.5, tau_high=0.5)
        draws = objective.sample_tau(schedule, torch.Generator().manual_seed(0), n=100)
        assert (draws == 0.5).all()

    def test_mean_matches_uniform_moments(self):
        schedule = objective.TrainSchedule()
        draws = objective.sample_tau(schedule, torch.Generator().manual_seed(1), n=10000)
        tolerance = 3 * (0.95 / math.sqrt(12 * 10000))
        assert float(draws.mean()) == pytest.approx(0.525, abs=tolerance)

    def test_support(self):
        schedule = objective.TrainSchedule()
        draws = objective.sample_tau(schedule, torch.Generator().manual_seed(2), n=10000)
        assert float(draws.min()) >= 0.05
        assert float(draws.max()) <= 1.0


class TestAnneal:
    def schedule(self):
        return objective.TrainSchedule(
            lambda1=10.0,
            temperature_start=5.0,
            temperature_end=0.5,
            sparsity_warmup_fraction=0.25,
            sparsity_delay_fraction=0.0,
        )

    def test_start_of_training(self):
        lambda1, temperature = objective.anneal(self.schedule(), 0, 1000)
        assert lambda1 == 0.0
        assert temperature == 5.0

    def test_end_of_training(self):
        lambda1, temperature = objective.anneal(self.schedule(), 1000, 1000)
        assert lambda1 == 10.0
        assert temperature == pytest.approx(0.5, abs=1e-12)

    def test_midpoint_closed_form(self):
        lambda1, temperature = objective.anneal(self.schedule(), 500, 1000)
        assert lambda1 == 10.0
        assert temperature == pytest.approx(5.0 * 0.1**0.5, abs=1e-9)

    def test_linear_ramp_inside_warmup(self):
        lambda1, _ = objective.anneal(self.schedule(), 125, 1000)
        assert lambda1 == pytest.approx(5.0, abs=1e-12)

    def test_step_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            objective.anneal(self.schedule(), 1001, 1000)

    def test_delayed_ramp_holds_then_rises(self):
        schedule = objective.TrainSchedule(
            lambda1=10.0, sparsity_warmup_fraction=0.25, sparsity_delay_fraction=0.25
        )
        assert objective.anneal(schedule, 0, 1000)[0] == 0.0
        assert objective.anneal(schedule, 250, 1000)[0] == 0.0
        assert objective.anneal(schedule, 375, 1000)[0] == pytest.approx(5.0)
        assert objective.anneal(schedule, 500, 1000)[0] == 10.0
        assert objective.anneal(schedule, 1000, 1000)[0] == 10.0
