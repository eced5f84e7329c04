import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comatch import oracles
from comatch.errors import InvalidArgumentError, StateError
from comatch.pseudolabel import (
    DistributionAligner,
    MemoryBank,
    affinity,
    confidence_mask,
    distribution_align,
    memory_smoothed_labels,
    smooth_pseudo_label,
    smoothness_objective,
    smoothness_objective_grad,
)

from conftest import random_simplex, random_unit


class TestDistributionAlignment:
    def test_uniform_mean_is_identity(self, rng):
        p = random_simplex(rng, 200, 6)
        np.testing.assert_allclose(distribution_align(p, np.full(6, 1 / 6)), p, atol=1e-12)

    def test_reweighting_arithmetic(self):
        # (0.6/0.75, 0.4/0.25) = (0.8, 1.6), normalized by 2.4
        np.testing.assert_allclose(distribution_align([0.6, 0.4], [0.75, 0.25]), [1 / 3, 2 / 3], atol=1e-15)

    def test_single_support(self):
        np.testing.assert_array_equal(distribution_align([1.0, 0.0], [0.5, 0.5]), [1.0, 0.0])

    def test_floor_on_collapsed_mean(self):
        out = distribution_align([0.5, 0.5], [1.0, 0.0])
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out.sum(), 1.0)

    def test_aligner_uses_old_mean_then_updates(self, rng):
        al = DistributionAligner(3, rho=0.9)
        p = random_simplex(rng, 10, 3)
        out = al.align(p)
        np.testing.assert_allclose(out, p, atol=1e-12)  # uniform start
        np.testing.assert_allclose(al.running_mean, 0.9 / 3 + 0.1 * p.mean(axis=0), atol=1e-15)
        np.testing.assert_allclose(al.running_mean.sum(), 1.0, atol=1e-12)

    def test_bad_rho(self):
        with pytest.raises(InvalidArgumentError):
            DistributionAligner(2, rho=1.0)


def _entries(n, start=0):
    idx = np.arange(start, start + n, dtype=np.float64)
    probs = np.column_stack([idx, 1.0 - idx])
    embeds = np.column_stack([idx, np.zeros(n)])
    return probs, embeds


class TestMemoryBank:
    def test_fifo_eviction(self):
        bank = MemoryBank(2, 2, 2)
        for i in range(3):
            p, z = _entries(1, i)
            bank.push(p, z)
        np.testing.assert_array_equal(bank.embeds[:, 0], [1.0, 2.0])

    def test_push_full_batch(self):
        bank = MemoryBank(600, 2, 2)
        p, z = _entries(64 + 448)
        bank.push(p, z)
        assert len(bank) == 512

    def test_push_nothing(self):
        bank = MemoryBank(4, 2, 2)
        bank.push(*_entries(2))
        before = bank.embeds.copy()
        bank.push(np.empty((0, 2)), np.empty((0, 2)))
        np.testing.assert_array_equal(bank.embeds, before)

    def test_labeled_flags_follow_entries(self):
        bank = MemoryBank(3, 2, 2)
        bank.push(*_entries(2), labeled=True)
        bank.push(*_entries(2, 2), labeled=False)
        np.testing.assert_array_equal(bank.labeled, [True, False, False])

    @given(st.integers(1, 8), st.lists(st.integers(0, 5), max_size=10))
    def test_holds_last_pushed(self, K, sizes):
        bank = MemoryBank(K, 2, 2)
        pushed, start = [], 0
        for n in sizes:
            p, z = _entries(n, start)
            bank.push(p, z)
            pushed.extend(range(start, start + n))
            start += n
            assert len(bank) <= K
        expected = pushed[-K:] if pushed else []
        np.testing.assert_array_equal(bank.embeds[:, 0], np.array(expected, dtype=float))


class TestAffinity:
    def test_single_entry(self):
        np.testing.assert_allclose(affinity([[1.0, 0.0]], [[0.0, 1.0]], 0.2), [[1.0]])

    def test_identical_bank(self, rng):
        z = random_unit(rng, 1, 4)
        bank = np.repeat(random_unit(rng, 1, 4), 7, axis=0)
        np.testing.assert_allclose(affinity(z, bank, 0.2), np.full((1, 7), 1 / 7), atol=1e-15)

    def test_two_entry_value(self):
        a = affinity([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]], 0.2)
        np.testing.assert_allclose(a, [[0.993307149075715, 0.006692850924284855]], rtol=1e-12)

    def test_empty_bank(self):
        with pytest.raises(StateError):
            affinity([[1.0, 0.0]], np.empty((0, 2)), 0.2)

    def test_matches_oracle(self, rng):
        z, bank = random_unit(rng, 5, 3), random_unit(rng, 11, 3)
        ref = [oracles.affinity(zb, bank.tolist(), 0.1) for zb in z.tolist()]
        np.testing.assert_allclose(affinity(z, bank, 0.1), ref, atol=1e-13)

    def test_monotone_in_own_similarity(self, rng):
        bank = random_unit(rng, 6, 3)
        for _ in range(50):
            z = random_unit(rng, 1, 3)[0]
            logits = bank @ z
            base = np.exp(logits / 0.2) / np.exp(logits / 0.2).sum()
            bumped_logits = logits.copy()
            bumped_logits[2] += 0.05
            bumped = np.exp(bumped_logits / 0.2) / np.exp(bumped_logits / 0.2).sum()
            assert bumped[2] > base[2]
        # and through the public function, by moving the query toward entry 2
        z = random_unit(rng, 1, 3)[0]
        a0 = affinity(z[None], bank, 0.2)[0, 2]
        z2 = (z + 0.1 * bank[2]) / np.linalg.norm(z + 0.1 * bank[2])
        if bank[2] @ z2 > bank[2] @ z:
            assert affinity(z2[None], bank, 0.2)[0, 2] > a0 or np.allclose(bank[2], z)


class TestSmoothing:
    def test_alpha_one(self, rng):
        p = random_simplex(rng, 4, 3)
        a = random_simplex(rng, 4, 5)
        np.testing.assert_array_equal(smooth_pseudo_label(p, a, random_simplex(rng, 5, 3), 1.0), p)

    def test_fixed_point(self, rng):
        p = random_simplex(rng, 1, 3)
        a = random_simplex(rng, 1, 6)
        np.testing.assert_allclose(smooth_pseudo_label(p, a, np.repeat(p, 6, axis=0), 0.3), p, atol=1e-15)

    def test_worked_example(self):
        q = smooth_pseudo_label([0.7, 0.3], [0.5, 0.5], [[1.0, 0.0], [0.0, 1.0]], 0.9)
        np.testing.assert_allclose(q, [0.68, 0.32], atol=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            smooth_pseudo_label([0.5, 0.5], [1.0], [[1.0, 0.0], [0.0, 1.0]], 0.9)

    def test_alpha_range(self):
        with pytest.raises(InvalidArgumentError):
            smooth_pseudo_label([0.5, 0.5], [1.0], [[1.0, 0.0]], 1.2)

    def test_matches_oracle(self, rng):
        p, z = random_simplex(rng, 4, 3), random_unit(rng, 4, 5)
        bp, bz = random_simplex(rng, 9, 3), random_unit(rng, 9, 5)
        q = smooth_pseudo_label(p, affinity(z, bz, 0.2), bp, 0.9)
        for b in range(4):
            ref = oracles.smooth_pseudo_label(p[b], z[b], bp.tolist(), bz.tolist(), 0.9, 0.2)
            np.testing.assert_allclose(q[b], ref, atol=1e-13)

    def test_minimizer_and_simplex(self, rng):
        for _ in range(200):
            C, K = rng.integers(2, 8), rng.integers(1, 30)
            p = random_simplex(rng, 1, C)[0]
            a = random_simplex(rng, 1, K)[0]
            bank = random_simplex(rng, K, C)
            alpha = rng.uniform()
            q = smooth_pseudo_label(p, a, bank, alpha)
            assert np.all(q >= 0) and abs(q.sum() - 1) < 1e-9
            assert np.max(np.abs(smoothness_objective_grad(q, p, a, bank, alpha))) < 1e-9
            J = smoothness_objective(q, p, a, bank, alpha)
            for _ in range(5):
                d = rng.standard_normal(C)
                d *= rng.uniform(1e-3, 0.1) / np.linalg.norm(d)
                assert J <= smoothness_objective(q + d, p, a, bank, alpha)

    def test_objective_grad_matches_finite_differences(self, rng):
        from comatch.numerics import finite_difference_gradient

        p, a, bank = random_simplex(rng, 1, 4)[0], random_simplex(rng, 1, 6)[0], random_simplex(rng, 6, 4)
        q = random_simplex(rng, 1, 4)[0]
        fd = finite_difference_gradient(lambda v: smoothness_objective(v, p, a, bank, 0.7), q)
        np.testing.assert_allclose(smoothness_objective_grad(q, p, a, bank, 0.7), fd, atol=1e-8)

    def test_empty_bank_keeps_prediction(self, rng):
        p = random_simplex(rng, 3, 2)
        out = memory_smoothed_labels(p, random_unit(rng, 3, 4), MemoryBank(5, 2, 4), 0.9, 0.2)
        np.testing.assert_array_equal(out, p)


class TestConfidenceMask:
    def test_above(self):
        assert confidence_mask([0.96, 0.04], 0.95)

    def test_uniform(self):
        assert not confidence_mask(np.full(10, 0.1), 0.95)

    def test_boundary_inclusive(self):
        assert confidence_mask([0.95, 0.05], 0.95)

    def test_batched(self):
        np.testing.assert_array_equal(confidence_mask([[0.99, 0.01], [0.6, 0.4]], 0.95), [True, False])
