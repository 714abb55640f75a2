"""Selection distribution, sampling, relaxation, and masking."""

import numpy as np
import pytest
import torch

from regionselect import regions, selector
from regionselect.exceptions import NumericalError


def small_partition(h=8, w=8):
    labels = np.zeros((h, w), dtype=int)
    labels[:, w // 2 :] = 1
    labels[h // 2 :, : w // 2] = 2
    return regions.partition_from_labels(labels)


class StubSelector:
    """Fixed-output stand-in with the selector call signature."""

    def __init__(self, mean_value=0.0, embed_value=0.0):
        self.mean_value = mean_value
        self.embed_value = embed_value

    def __call__(self, images, taus):
        b, _, h, w = images.shape
        mean = torch.full((b, h, w), float(self.mean_value))
        embed = torch.full((b, 3, h, w), float(self.embed_value))
        return mean, embed


class TestBuildDistribution:
    def test_constant_mean_zero_embeddings(self):
        partition = small_partition()
        image = np.full((3, 8, 8), 0.5)
        dist = selector.build_distribution(StubSelector(mean_value=1.25), image, partition, tau=0.5)
        assert torch.allclose(dist.mu, torch.full((3,), 1.25))
        assert torch.allclose(dist.covariance, torch.zeros(3, 3))

    def test_identity_row_embeddings_give_partial_identity_covariance(self):
        k = 3
        d = 5
        embeddings = np.zeros((d, k))
        embeddings[:k] = np.eye(k)
        dist = selector.MaskDistribution.from_parameters(np.zeros(d), embeddings)
        expected = np.zeros((d, d))
        expected[:k, :k] = np.eye(k)
        assert np.array_equal(dist.covariance.numpy(), expected)

    def test_covariance_is_embeddings_outer_product_exactly(self):
        rng = np.random.default_rng(0)
        e = rng.normal(size=(7, 3))
        dist = selector.MaskDistribution.from_parameters(np.zeros(7), e)
        assert np.array_equal(dist.covariance.numpy(), e @ e.T)

    def test_random_network_covariance_is_psd(self):
        torch.manual_seed(0)
        net = selector.SelectorNetwork(in_channels=3, embedding_dim=3, base_width=8)
        rng = np.random.default_rng(1)
        image = rng.uniform(0, 1, size=(3, 16, 16))
        partition = regions.slic_partition(image, n_segments=4)
        dist = selector.build_distribution(net, image, partition, tau=0.3)
        eigenvalues = np.linalg.eigvalsh(dist.covariance.detach().numpy())
        assert eigenvalues.min() >= -1e-6

    def test_non_finite_network_output_fails_loudly(self):
        partition = small_partition()
        image = np.full((3, 8, 8), 0.5)
        with pytest.raises(NumericalError):
            selector.build_distribution(
                StubSelector(mean_value=float("nan")), image, partition, tau=0.5
            )

    def test_tau_out_of_range_rejected(self):
        partition = small_partition()
        image = np.full((3, 8, 8), 0.5)
        with pytest.raises(ValueError):
            selector.build_distribution(StubSelector(), image, partition, tau=0.0)

    def test_psd_property_over_random_embeddings(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            d = int(rng.integers(2, 65))
            k = int(rng.integers(1, 9))
            e = rng.normal(scale=rng.uniform(0.1, 3.0), size=(d, k))
            sigma = e @ e.T
            assert np.linalg.eigvalsh(sigma).min() >= -1e-6


class TestSampleProbabilities:
    def test_zero_embeddings_are_deterministic(self):
        mu = np.array([-1.0, 0.5, 2.0])
        dist = selector.MaskDistribution.from_parameters(mu, np.zeros((3, 2)))
        p1 = selector.sample_probabilities(dist, torch.Generator().manual_seed(0))
        p2 = selector.sample_probabilities(dist, torch.Generator().manual_seed(99))
        assert torch.allclose(p1, p2)
        assert np.allclose(p1.numpy(), 1.0 / (1.0 + np.exp(-mu)))

    def test_zero_mean_zero_covariance_gives_half(self):
        dist = selector.MaskDistribution.from_parameters(np.zeros(4), np.zeros((4, 1)))
        p = selector.sample_probabilities(dist)
        assert torch.allclose(p, torch.full((4,), 0.5, dtype=p.dtype))

    def test_rank_one_embeddings_give_perfectly_correlated_logits(self):
        dist = selector.MaskDistribution.from_parameters(
            np.zeros(2), np.ones((2, 1))
        )
        generator = torch.Generator().manual_seed(3)
        logits = np.array(
            [
                torch.logit(selector.sample_probabilities(dist, generator)).numpy()
                for _ in range(10000)
            ]
        )
        corr = np.corrcoef(logits[:, 0], logits[:, 1])[0, 1]
        assert abs(corr - 1.0) <= 1e-6

    def test_outputs_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(2)
        dist = selector.MaskDistribution.from_parameters(
            rng.normal(scale=30.0, size=6), rng.normal(size=(6, 2))
        )
        generator = torch.Generator().manual_seed(0)
        for _ in range(50):
            p = selector.sample_probabilities(dist, generator)
            assert (p > 0).all() and (p < 1).all()

    def test_reparameterized_moments_match_distribution(self):
        # fixed fixture: 4 regions, 2 embedding dimensions, 20000 draws
        mu = np.array([-0.5, 0.0, 0.8, 1.5])
        e = np.array([[1.0, 0.0], [0.5, 0.5], [-0.3, 0.7], [0.2, -0.6]])
        dist = selector.MaskDistribution.from_parameters(mu, e)
        generator = torch.Generator().manual_seed(17)
        draws = torch.stack(
            [selector.sample_selection_logits(dist, generator) for _ in range(20000)]
        ).numpy()
        sigma = e @ e.T
        se = np.sqrt(np.diag(sigma) / draws.shape[0])
        assert (np.abs(draws.mean(axis=0) - mu) <= 4 * se).all()
        sample_cov = np.cov(draws.T)
        rel_err = np.linalg.norm(sample_cov - sigma) / np.linalg.norm(sigma)
        assert rel_err <= 0.10


class TestBinarizeGumbel:
    def test_saturated_probability_always_activates(self):
        p = torch.full((10000,), 1.0 - 1e-12, dtype=torch.float64)
        out = selector.binarize_gumbel(p, temperature=0.5,
                                       generator=torch.Generator().manual_seed(0), hard=True)
        assert (out == 1.0).all()

    def test_hard_sampling_frequency_matches_bernoulli(self):
        p = torch.full((10000,), 0.7, dtype=torch.float64)
        out = selector.binarize_gumbel(p, temperature=0.1,
                                       generator=torch.Generator().manual_seed(5), hard=True)
        frequency = float(out.mean())
        assert abs(frequency - 0.7) <= 3 * np.sqrt(0.7 * 0.3 / 10000)

    def test_high_temperature_flattens_the_relaxation(self):
        p = torch.full((10000,), 0.5, dtype=torch.float64)
        out = selector.binarize_gumbel(p, temperature=10.0,
                                       generator=torch.Generator().manual_seed(6), hard=False)
        assert float(out.std()) < 0.15

    def test_hard_forward_values_are_exactly_binary(self):
        p = torch.rand(1000, generator=torch.Generator().manual_seed(7))
        p = p.clamp(0.01, 0.99)
        out = selector.binarize_gumbel(p, temperature=0.7,
                                       generator=torch.Generator().manual_seed(8), hard=True)
        assert set(out.detach().unique().tolist()) <= {0.0, 1.0}

    def test_straight_through_gradient_flows(self):
        p = torch.full((64,), 0.6, requires_grad=True)
        out = selector.binarize_gumbel(p, temperature=0.7,
                                       generator=torch.Generator().manual_seed(9), hard=True)
        out.sum().backward()
        assert p.grad is not None and float(p.grad.abs().sum()) > 0

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ValueError):
            selector.binarize_gumbel(torch.tensor([0.5]), temperature=0.0)

    def test_gradient_matches_finite_differences(self):
        # common random numbers: same noise for autograd and both FD sides
        torch.manual_seed(0)
        d, k, n = 3, 2, 4000
        mu0 = torch.tensor([0.2, -0.4, 0.6], dtype=torch.float64)
        e = torch.tensor([[0.5, 0.1], [-0.2, 0.4], [0.3, -0.3]], dtype=torch.float64)
        eps = torch.randn(n, k, dtype=torch.float64)
        u = torch.rand(n, d, dtype=torch.float64).clamp(1e-9, 1 - 1e-9)
        g = torch.log(u) - torch.log1p(-u)
        temperature = 0.8

        def mean_relaxed(mu):
            z = mu + eps @ e.T
            p = torch.sigmoid(z)
            y = torch.sigmoid((torch.logit(p) + g) / temperature)
            return y.mean()

        mu = mu0.clone().requires_grad_(True)
        mean_relaxed(mu).backward()
        analytic = mu.grad.numpy()

        h = 1e-4
        numeric = np.zeros(d)
        for j in range(d):
            up, down = mu0.clone(), mu0.clone()
            up[j] += h
            down[j] -= h
            numeric[j] = (mean_relaxed(up) - mean_relaxed(down)).item() / (2 * h)
        assert np.abs(analytic - numeric).max() / np.abs(numeric).max() <= 1e-3


class TestDeterministicBinarize:
    def test_simple_threshold(self):
        out = selector.deterministic_binarize(torch.tensor([0.4, 0.6]), cutoff=0.5)
        assert out.tolist() == [0.0, 1.0]

    def test_boundary_is_strict(self):
        out = selector.deterministic_binarize(torch.full((5,), 0.5), cutoff=0.5)
        assert (out == 0).all()

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(11)
        p = rng.uniform(0, 1, size=100)
        out = selector.deterministic_binarize(torch.from_numpy(p), cutoff=0.5).numpy()
        assert np.array_equal(out, (p > 0.5).astype(float))

    def test_invalid_cutoff_rejected(self):
        with pytest.raises(ValueError):
            selector.deterministic_binarize(torch.tensor([0.5]), cutoff=1.0)


class TestApplyMask:
    def make_mask(self, partition, hard_values, relaxed=None):
        hard = torch.tensor(hard_values, dtype=torch.float32)
        return selector.RegionMask(
            probabilities=hard.clamp(0.01, 0.99),
            hard=hard,
            relaxed=relaxed,
            partition=partition,
        )

    def test_all_ones_mask_is_identity(self):
        partition = small_partition()
        rng = np.random.default_rng(0)
        image = rng.uniform(0, 1, size=(3, 8, 8)).astype(np.float32)
        masked = selector.apply_mask(image, self.make_mask(partition, [1.0, 1.0, 1.0]))
        assert torch.equal(masked.x_m, masked.source)

    def test_all_zeros_mask_blanks_everything(self):
        partition = small_partition()
        image = np.random.default_rng(1).uniform(0.2, 1, size=(3, 8, 8))
        masked = selector.apply_mask(image, self.make_mask(partition, [0.0, 0.0, 0.0]))
        assert (masked.x_m == 0).all()

    def test_single_active_region_matches_indicator_oracle(self):
        partition = small_partition()
        rng = np.random.default_rng(2)
        image = rng.uniform(0.1, 1, size=(3, 8, 8))
        masked = selector.apply_mask(image, self.make_mask(partition, [0.0, 1.0, 0.0]))
        indicator = (partition.labels == 1).astype(np.float64)
        assert np.allclose(masked.x_m.numpy(), image.astype(np.float32) * indicator)

    def test_masking_exactness(self):
        rng = np.random.default_rng(3)
        image = rng.uniform(0.5, 1.0, size=(3, 16, 16))
        partition = regions.slic_partition(image, n_segments=6)
        hard = (rng.uniform(size=partition.region_count) > 0.5).astype(np.float32)
        masked = selector.apply_mask(image, self.make_mask(partition, hard))
        active_pixels = int(partition.region_sizes[hard > 0.5].sum())
        assert int((masked.x_m != 0).any(dim=0).sum()) <= active_pixels
        inactive = ~np.isin(partition.labels, np.where(hard > 0.5)[0])
        assert (masked.x_m.numpy()[:, inactive] == 0.0).all()
        active = ~inactive
        assert np.array_equal(
            masked.x_m.numpy()[:, active], masked.source.numpy()[:, active]
        )

    def test_relaxed_mode_scales_pixels(self):
        partition = small_partition()
        image = np.full((3, 8, 8), 1.0)
        relaxed = torch.tensor([0.25, 0.5, 1.0])
        mask = self.make_mask(partition, [0.0, 1.0, 1.0], relaxed=relaxed)
        masked = selector.apply_mask(image, mask)
        expected = relaxed.numpy()[partition.labels]
        assert np.allclose(masked.x_m.numpy(), expected[None])

    def test_shape_mismatch_rejected(self):
        partition = small_partition()
        with pytest.raises(ValueError):
            selector.apply_mask(np.zeros((3, 9, 9)), self.make_mask(partition, [1, 1, 1]))
