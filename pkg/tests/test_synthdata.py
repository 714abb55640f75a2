"""Synthetic dataset generator: determinism, balance, shortcut-freeness."""

import numpy as np
import pytest
from scipy import stats

from regionselect import synthdata
from regionselect.exceptions import ConfigError


@pytest.fixture(scope="module")
def medium_dataset():
    spec = synthdata.SyntheticSpec(train_count=200, test_count=40, seed=13)
    return synthdata.generate(spec, with_partitions=False)


class TestSpecValidation:
    def test_split_sizes_must_be_class_divisible(self):
        with pytest.raises(ConfigError):
            synthdata.SyntheticSpec(train_count=10, num_classes=4)

    def test_area_fractions_must_stay_in_bounds(self):
        with pytest.raises(ConfigError):
            synthdata.SyntheticSpec(area_fraction_low=0.01, train_count=4, test_count=4)

    def test_one_shape_per_class(self):
        with pytest.raises(ConfigError):
            synthdata.SyntheticSpec(num_classes=3, train_count=3, test_count=3)


class TestGeneration:
    def test_same_seed_reproduces_identical_datasets(self):
        spec = synthdata.SyntheticSpec(train_count=8, test_count=4, seed=2)
        a = synthdata.generate(spec)
        b = synthdata.generate(spec)
        for inst_a, inst_b in zip(a.train + a.test, b.train + b.test):
            assert np.array_equal(inst_a.image, inst_b.image)
            assert np.array_equal(inst_a.m_star, inst_b.m_star)
            assert np.array_equal(inst_a.partition.labels, inst_b.partition.labels)
            assert inst_a.label == inst_b.label

    def test_different_seeds_differ(self):
        a = synthdata.generate(synthdata.SyntheticSpec(train_count=4, test_count=4, seed=0),
                               with_partitions=False)
        b = synthdata.generate(synthdata.SyntheticSpec(train_count=4, test_count=4, seed=1),
                               with_partitions=False)
        assert not np.array_equal(a.train[0].image, b.train[0].image)

    def test_class_balance_in_both_splits(self, medium_dataset):
        for split in (medium_dataset.train, medium_dataset.test):
            counts = np.bincount([inst.label for inst in split], minlength=4)
            assert (counts == len(split) // 4).all()

    def test_masks_nonempty_and_inside_borders(self, medium_dataset):
        for inst in medium_dataset.train:
            assert inst.m_star.any()
            touches = (
                inst.m_star[0].any()
                + inst.m_star[-1].any()
                + inst.m_star[:, 0].any()
                + inst.m_star[:, -1].any()
            )
            assert touches < 4

    def test_area_fractions_within_contract(self, medium_dataset):
        fractions = np.array([inst.m_star.mean() for inst in medium_dataset.train])
        assert fractions.min() >= 0.05
        assert fractions.max() <= 0.35

    def test_mask_matches_rendered_object_exactly(self):
        spec = synthdata.SyntheticSpec(train_count=4, test_count=4, seed=3)
        rng = synthdata._instance_rng(spec.seed, 0, 1)
        image, m_star = synthdata.render_instance(spec, label=1, rng=rng)
        rng2 = synthdata._instance_rng(spec.seed, 0, 1)
        image2, m_star2 = synthdata.render_instance(spec, label=1, rng=rng2)
        assert np.array_equal(m_star, m_star2)
        assert np.array_equal(image, image2)

    def test_texture_kind_independent_of_label(self):
        # chi-square over 2000 instances; deterministic given the seed
        spec = synthdata.SyntheticSpec(train_count=2000, test_count=4, seed=17)
        labels, kinds = [], []
        for index in range(spec.train_count):
            label = index % spec.num_classes
            rng = synthdata._instance_rng(spec.seed, 0, index)
            kind = spec.textures[int(rng.integers(len(spec.textures)))]
            labels.append(label)
            kinds.append(spec.textures.index(kind))
        table = np.zeros((4, 4))
        for lab, kind in zip(labels, kinds):
            table[lab, kind] += 1
        _, p_value, _, _ = stats.chi2_contingency(table)
        assert p_value > 0.01

    def test_area_fraction_distribution_identical_across_classes(self, medium_dataset):
        by_class = {
            c: np.array([i.m_star.mean() for i in medium_dataset.train if i.label == c])
            for c in range(4)
        }
        for a in range(4):
            for b in range(a + 1, 4):
                statistic = stats.ks_2samp(by_class[a], by_class[b]).statistic
                assert statistic < 0.25  # 50 samples per class; 2000-instance bound is 0.1


class TestDatasetIO:
    def test_round_trip_and_checksum_guard(self, tmp_path):
        spec = synthdata.SyntheticSpec(train_count=8, test_count=4, seed=5)
        dataset = synthdata.generate(spec)
        manifest = synthdata.save_dataset(tmp_path, dataset)
        assert set(manifest["checksums"]) == {"train", "test"}

        loaded = synthdata.load_dataset(tmp_path)
        assert loaded.spec == spec
        assert len(loaded.train) == 8 and len(loaded.test) == 4
        for a, b in zip(dataset.train, loaded.train):
            assert np.array_equal(a.image, b.image)
            assert np.array_equal(a.partition.labels, b.partition.labels)
            assert np.array_equal(a.partition.region_sizes, b.partition.region_sizes)

    def test_corruption_is_detected(self, tmp_path):
        spec = synthdata.SyntheticSpec(train_count=4, test_count=4, seed=6)
        synthdata.save_dataset(tmp_path, synthdata.generate(spec))
        path = tmp_path / "train.npz"
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(ConfigError):
            synthdata.load_dataset(tmp_path)

    def test_missing_manifest_is_a_config_error(self, tmp_path):
        with pytest.raises(ConfigError):
            synthdata.load_dataset(tmp_path)
