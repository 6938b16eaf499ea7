"""Tests for the training objectives and Hungarian matching."""

import itertools
import math
import unittest

import numpy as np
import torch

from maskslot.config import LossConfig
from maskslot.numerics import ContractError, pairwise_cosine, set_precision
from maskslot.objectives import (
    ObjectiveError,
    hungarian_match,
    instance_consistency_loss,
    mask_regularization,
    match_all,
    nn_normalize,
    ordered_pairs,
    semantic_alignment_loss,
    total_loss,
    validity,
)


def brute_force_match(a, b):
    """Best permutation by exhaustive search; ties go to the lexicographically smallest."""
    scores = pairwise_cosine(a, b).numpy()
    size = scores.shape[0]
    best, best_perm = -math.inf, None
    for perm in itertools.permutations(range(size)):
        total = sum(scores[p, perm[p]] for p in range(size))
        if total > best + 1e-12:
            best, best_perm = total, perm
    return np.array(best_perm)


def random_masks(gen, shape):
    logits = torch.randn(*shape, generator=gen)
    return torch.softmax(logits, dim=-2)


class ObjectiveTestCase(unittest.TestCase):
    def setUp(self):
        set_precision("float64")
        self.gen = torch.Generator().manual_seed(0)


class TestSemanticAlignment(ObjectiveTestCase):
    """Tests for semantic_alignment_loss()."""

    def plans(self, num_frames, num_patches):
        return {
            (t, j): torch.softmax(torch.randn(num_patches * num_patches, generator=self.gen), 0).reshape(
                num_patches, num_patches
            )
            for t, j in ordered_pairs(num_frames)
        }

    def test_matches_explicit_sum(self):
        """Verify the loss equals the explicit four-fold sum."""
        student = random_masks(self.gen, (3, 2, 4))
        teacher = random_masks(self.gen, (3, 2, 4))
        plans = self.plans(3, 4)
        expected = 0.0
        for (t, j), plan in plans.items():
            for u in range(4):
                for v in range(4):
                    for n in range(2):
                        expected -= float(plan[u, v]) * float(teacher[j, n, v]) * math.log(float(student[t, n, u]) + 1e-8)
        self.assertAlmostEqual(float(semantic_alignment_loss(student, teacher, plans)), expected, places=10)

    def test_non_negative(self):
        """Verify L_sem >= 0 for masks in [0, 1]."""
        for _ in range(20):
            student = random_masks(self.gen, (2, 3, 5))
            teacher = random_masks(self.gen, (2, 3, 5))
            self.assertGreaterEqual(float(semantic_alignment_loss(student, teacher, self.plans(2, 5))), 0.0)

    def test_zero_when_student_certain(self):
        """Verify L_sem is ~0 when the student puts mass 1 wherever targets select."""
        masks = torch.zeros(2, 2, 3)
        masks[:, 0, :] = 1.0
        plans = {(0, 1): torch.eye(3) / 3, (1, 0): torch.eye(3) / 3}
        self.assertLess(float(semantic_alignment_loss(masks, masks, plans)), 1e-7)

    def test_teacher_gets_no_gradient(self):
        """Verify gradients reach the student masks only."""
        student = random_masks(self.gen, (2, 2, 3)).requires_grad_(True)
        teacher = random_masks(self.gen, (2, 2, 3)).requires_grad_(True)
        semantic_alignment_loss(student, teacher, self.plans(2, 3)).backward()
        self.assertIsNotNone(student.grad)
        self.assertIsNone(teacher.grad)

    def test_rejects_out_of_range_masks(self):
        """Verify masks outside [0, 1] raise ContractError."""
        bad = torch.full((2, 2, 3), 1.5)
        good = torch.full((2, 2, 3), 0.5)
        with self.assertRaises(ContractError):
            semantic_alignment_loss(bad, good, {})
        with self.assertRaises(ContractError):
            semantic_alignment_loss(good, -good, {})

    def test_rejects_shape_mismatch(self):
        """Verify student and teacher masks must have equal shapes."""
        with self.assertRaises(ContractError):
            semantic_alignment_loss(torch.zeros(2, 2, 3), torch.zeros(2, 3, 3), {})


class TestMaskRegularization(ObjectiveTestCase):
    """Tests for mask_regularization()."""

    def test_bounds(self):
        """Verify 0 <= L_reg <= T * N * (N - 1) for nonnegative masks."""
        for _ in range(20):
            masks = random_masks(self.gen, (3, 4, 6))
            value = float(mask_regularization(masks))
            self.assertGreaterEqual(value, 0.0)
            self.assertLessEqual(value, 3 * 4 * 3 + 1e-9)

    def test_disjoint_masks_score_zero(self):
        """Verify masks with disjoint support have no overlap penalty."""
        masks = torch.eye(3).unsqueeze(0).repeat(2, 1, 1)
        self.assertEqual(float(mask_regularization(masks)), 0.0)

    def test_identical_masks_score_maximum(self):
        """Verify N identical masks reach T * N * (N - 1)."""
        masks = torch.ones(2, 3, 5)
        self.assertAlmostEqual(float(mask_regularization(masks)), 2 * 3 * 2, places=6)

    def test_rejects_negative(self):
        """Verify negative mask entries raise ContractError."""
        with self.assertRaises(ContractError):
            mask_regularization(-torch.ones(1, 2, 2))


class TestValidity(ObjectiveTestCase):
    """Tests for validity()."""

    def test_area_and_cosine_thresholds(self):
        """Verify an instance is valid only when its semantic is large enough and its slot points at the center."""
        binarized = torch.tensor([[1.0, 1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]])  # areas 0.5, 0.25
        centers = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        slots = torch.tensor(
            [
                [[2.0, 0.1], [-1.0, 0.0]],
                [[0.0, 3.0], [0.0, 1.0]],
            ]
        )
        valid = validity(binarized, centers, slots, tau1=0.3, tau2=0.5)
        expected = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
        self.assertTrue(torch.equal(valid, expected))

    def test_thresholds_inclusive(self):
        """Verify area exactly tau1 counts as valid."""
        valid = validity(torch.tensor([[1.0, 0.0]]), torch.tensor([[1.0, 0.0]]), torch.tensor([[[1.0, 0.0]]]), 0.5, 0.5)
        self.assertEqual(float(valid[0, 0]), 1.0)


class TestHungarianMatch(ObjectiveTestCase):
    """Tests for hungarian_match()."""

    def test_matches_brute_force(self):
        """Verify agreement with exhaustive search for P = 4 and P = 5."""
        for size, trials in ((4, 300), (5, 60)):
            for _ in range(trials):
                a = torch.randn(size, 3, generator=self.gen)
                b = torch.randn(size, 3, generator=self.gen)
                np.testing.assert_array_equal(hungarian_match(a, b), brute_force_match(a, b))

    def test_is_permutation(self):
        """Verify the output is a permutation of 0..P-1."""
        perm = hungarian_match(torch.randn(6, 4, generator=self.gen), torch.randn(6, 4, generator=self.gen))
        self.assertEqual(sorted(perm.tolist()), list(range(6)))

    def test_ties_resolve_lexicographically(self):
        """Verify fully tied scores give the identity permutation."""
        a = torch.ones(4, 3)
        np.testing.assert_array_equal(hungarian_match(a, a.clone()), np.arange(4))

    def test_partial_tie(self):
        """Verify a tie between two optimal permutations picks the lexicographically smaller one."""
        a = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        b = torch.tensor([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
        np.testing.assert_array_equal(hungarian_match(a, b), np.array([1, 2, 0]))

    def test_scale_invariance(self):
        """Verify positive rescaling of either side's vectors does not change the match."""
        a = torch.randn(5, 4, generator=self.gen)
        b = torch.randn(5, 4, generator=self.gen)
        scale = torch.rand(5, 1, generator=self.gen) * 10 + 0.1
        np.testing.assert_array_equal(hungarian_match(a, b), hungarian_match(a * scale, b))
        np.testing.assert_array_equal(hungarian_match(a, b), hungarian_match(a, b * scale))

    def test_rejects_bad_shapes(self):
        """Verify inputs must be two [P, D] tensors of equal shape."""
        with self.assertRaises(ContractError):
            hungarian_match(torch.zeros(3, 2), torch.zeros(4, 2))

    def test_match_all_covers_ordered_pairs(self):
        """Verify match_all returns an [N, P] permutation table for every ordered frame pair."""
        slots = torch.randn(3, 2, 4, 5, generator=self.gen)
        matches = match_all(slots, slots + 0.01)
        self.assertEqual(set(matches), set(ordered_pairs(3)))
        self.assertEqual(matches[(0, 2)].shape, (2, 4))


class TestInstanceConsistency(ObjectiveTestCase):
    """Tests for instance_consistency_loss()."""

    def make(self, frames=2, semantics=2, instances=3, dim=4):
        student = torch.randn(frames, semantics, instances, dim, generator=self.gen)
        teacher = torch.randn(frames, semantics, instances, dim, generator=self.gen)
        s_valid = (torch.rand(frames, semantics, instances, generator=self.gen) > 0.3).to(student.dtype)
        t_valid = (torch.rand(frames, semantics, instances, generator=self.gen) > 0.3).to(student.dtype)
        return student, teacher, s_valid, t_valid

    def test_non_negative(self):
        """Verify L_obj >= 0."""
        for _ in range(20):
            s, t, sv, tv = self.make()
            loss = instance_consistency_loss(s, t, sv, tv, match_all(s, t), 1.0)
            self.assertGreaterEqual(float(loss), 0.0)

    def test_matches_explicit_sum(self):
        """Verify the loss equals pull + push summed over ordered pairs by hand."""
        s, t, sv, tv = self.make()
        matches = match_all(s, t)
        sn, tn = nn_normalize(s), nn_normalize(t)
        expected = 0.0
        for (a, b), perm in matches.items():
            for n in range(2):
                for p in range(3):
                    if sv[a, n, p] == 0:
                        continue
                    for q in range(3):
                        dist = float(torch.linalg.vector_norm(sn[a, n, p] - tn[b, n, q]))
                        if q == perm[n, p]:
                            expected += dist * float(tv[b, n, q])
                        else:
                            expected += max(0.0, 1.0 - dist)
        loss = instance_consistency_loss(s, t, sv, tv, matches, 1.0)
        self.assertAlmostEqual(float(loss), expected, places=10)

    def test_relabeling_invariance(self):
        """Verify a consistent relabeling of instance indices leaves the loss unchanged."""
        s, t, sv, tv = self.make()
        sigma = torch.tensor([2, 0, 1])
        base = instance_consistency_loss(s, t, sv, tv, match_all(s, t), 1.0)
        s2, t2 = s[:, :, sigma], t[:, :, sigma]
        sv2, tv2 = sv[:, :, sigma], tv[:, :, sigma]
        relabeled = instance_consistency_loss(s2, t2, sv2, tv2, match_all(s2, t2), 1.0)
        self.assertAlmostEqual(float(base), float(relabeled), places=10)

    def test_invalid_student_slots_contribute_nothing(self):
        """Verify all-invalid student slots give a zero loss."""
        s, t, _, tv = self.make()
        loss = instance_consistency_loss(s, t, torch.zeros_like(tv), tv, match_all(s, t), 1.0)
        self.assertEqual(float(loss), 0.0)

    def test_identical_slots_with_small_margin(self):
        """Verify identical, well-separated student and teacher slots give ~0 loss."""
        slots = torch.eye(3).reshape(1, 1, 3, 3).repeat(2, 1, 1, 1)
        valid = torch.ones(2, 1, 3)
        loss = instance_consistency_loss(slots, slots.clone(), valid, valid, match_all(slots, slots), 0.5)
        self.assertLess(float(loss), 1e-6)

    def test_teacher_gets_no_gradient(self):
        """Verify only student slots receive a gradient."""
        s, t, sv, tv = self.make()
        s.requires_grad_(True)
        t.requires_grad_(True)
        instance_consistency_loss(s, t, sv, tv, match_all(s, t), 1.0).backward()
        self.assertIsNotNone(s.grad)
        self.assertIsNone(t.grad)


class TestTotalLoss(ObjectiveTestCase):
    """Tests for total_loss()."""

    def test_unweighted_sum(self):
        """Verify the total is L_sem + L_obj + L_reg."""
        out = total_loss(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(0.5), LossConfig())
        self.assertEqual(out.as_floats(), {"total": 3.5, "sem": 1.0, "reg": 0.5, "obj": 2.0})

    def test_disabled_components_are_zero(self):
        """Verify a disabled component contributes exactly 0."""
        cfg = LossConfig(enable_obj=False, enable_reg=False)
        out = total_loss(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(0.5), cfg)
        self.assertEqual(float(out.total), 1.0)
        self.assertEqual(float(out.obj), 0.0)

    def test_disabled_non_finite_is_ignored(self):
        """Verify a non-finite value in a disabled component does not raise."""
        cfg = LossConfig(enable_obj=False)
        out = total_loss(torch.tensor(1.0), torch.tensor(float("nan")), torch.tensor(0.0), cfg)
        self.assertEqual(float(out.total), 1.0)

    def test_non_finite_raises(self):
        """Verify a non-finite enabled component raises ObjectiveError naming it."""
        with self.assertRaises(ObjectiveError) as ctx:
            total_loss(torch.tensor(float("inf")), torch.tensor(0.0), torch.tensor(0.0), LossConfig())
        self.assertIn("L_sem", str(ctx.exception))


if __name__ == "__main__":
    unittest.main()
