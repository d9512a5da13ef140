"""Phantom generator: determinism, class structure, recorded ground truth."""

import numpy as np
import pytest

from slabgan.phantoms import N_CLASSES, phantom_dataset, phantom_generate


class TestDeterminism:
    def test_same_seed_bitwise(self):
        _, a = phantom_generate(7, 2, (32, 32, 32))
        _, b = phantom_generate(7, 2, (32, 32, 32))
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        _, a = phantom_generate(7, 2, (32, 32, 32))
        _, b = phantom_generate(8, 2, (32, 32, 32))
        assert not np.array_equal(a, b)


class TestStructure:
    def test_range(self):
        _, v = phantom_generate(0, 3, (32, 32, 32))
        assert v.min() >= -1.0 and v.max() <= 1.0
        assert v.dtype == np.float32

    def test_volumes_equal_mask_counts(self):
        ph, _ = phantom_generate(1, 2, (32, 32, 32))
        for key, mask in ph.masks.items():
            assert ph.volumes[key] == int(mask.sum())

    def test_organ_inside_body(self):
        ph, _ = phantom_generate(2, 1, (32, 32, 32))
        assert np.all(ph.masks["body"][ph.masks["organ"]])

    def test_lesion_fraction_increases_with_class(self):
        """Class 4 carries a larger mean lesion-mask fraction than class 0
        (checked over 100 seeds per class)."""
        fractions = {0: [], 4: []}
        for cls in fractions:
            for seed in range(100):
                ph, _ = phantom_generate(seed, cls, (24, 24, 24))
                fractions[cls].append(ph.masks["lesions"].mean())
        assert np.mean(fractions[4]) > np.mean(fractions[0])
        assert np.mean(fractions[0]) < 0.01

    def test_lesion_count_monotone_in_expectation(self):
        counts = []
        for cls in range(N_CLASSES):
            counts.append(np.mean([phantom_generate(s, cls, (16, 16, 16))[0].lesion_count
                                   for s in range(30)]))
        assert all(b > a for a, b in zip(counts, counts[1:]))

    def test_organ_factor_recorded(self):
        ph, _ = phantom_generate(3, 0, (32, 32, 32))
        assert 0.2 < ph.organ_factor < 0.55


class TestValidation:
    def test_extents_too_small(self):
        with pytest.raises(ValueError):
            phantom_generate(0, 0, (8, 8, 8))

    def test_class_out_of_range(self):
        with pytest.raises(ValueError):
            phantom_generate(0, 5, (32, 32, 32))


class TestDataset:
    def test_balanced_labels(self):
        _, labels, _ = phantom_dataset(10, extents=(16, 16, 16), base_seed=0)
        assert np.bincount(labels, minlength=5).tolist() == [2, 2, 2, 2, 2]

    def test_shapes(self):
        vols, labels, recs = phantom_dataset(4, extents=(16, 16, 16), base_seed=1)
        assert vols.shape == (4, 16, 16, 16)
        assert len(labels) == len(recs) == 4

    def test_deterministic(self):
        a, _, _ = phantom_dataset(3, extents=(16, 16, 16), base_seed=2)
        b, _, _ = phantom_dataset(3, extents=(16, 16, 16), base_seed=2)
        assert np.array_equal(a, b)
