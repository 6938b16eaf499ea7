"""Tests for inference and the segmentation metrics."""

import tempfile
import unittest
from pathlib import Path

import numpy as np
import torch
import yaml

from maskslot.dataset import load_indexed_png
from maskslot.evaluation import (
    METRICS,
    EvaluationError,
    MetricReport,
    border_background,
    boundary_f,
    candidate_objects,
    default_tolerance,
    evaluate_dataset,
    export_masks,
    fg_ari,
    infer,
    instance_palette,
    iou,
    jaccard_and_f,
    label_propagate,
    link_tracks,
    multi_object_eval,
    patch_majority,
    propagate_video,
    propagation_scores,
    report_table,
    upsample,
    write_report,
)
from maskslot.gradcheck import tiny_config
from maskslot.model import ClipOutput, SlotModel
from maskslot.numerics import DiagnosticWarning, seed_everything, set_precision
from maskslot.slots import InstanceOutput, SemanticOutput, SlotOutput
from maskslot.synthetic import ObjectSpec, SceneSpec, generate_video

GOLDEN = Path(__file__).parent / "fixtures" / "metrics_golden.yaml"


def square(size: int, top: int, left: int, extent: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    mask[top : top + extent, left : left + extent] = True
    return mask


class TestGoldenMetrics(unittest.TestCase):
    """Metric values checked against hand-computed fixtures."""

    @classmethod
    def setUpClass(cls):
        cls.golden = yaml.safe_load(GOLDEN.read_text())

    def test_iou(self):
        """Verify IoU on the fixture masks."""
        for case in self.golden["iou"]:
            with self.subTest(case["name"]):
                score = iou(np.array(case["pred"]), np.array(case["gt"]))
                self.assertAlmostEqual(score, case["expected"], places=12)

    def test_boundary_f(self):
        """Verify boundary F on the fixture masks."""
        for case in self.golden["boundary_f"]:
            with self.subTest(case["name"]):
                score = boundary_f(np.array(case["pred"]), np.array(case["gt"]), case["tolerance"])
                self.assertAlmostEqual(score, case["expected"], places=12)

    def test_fg_ari(self):
        """Verify FG-ARI on the fixture labelings."""
        for case in self.golden["fg_ari"]:
            with self.subTest(case["name"]):
                score = fg_ari(np.array(case["pred"]), np.array(case["gt"]))
                self.assertAlmostEqual(score, case["expected"], places=12)

    def test_jaccard_and_f(self):
        """Verify per-video J and F on the fixture videos."""
        for case in self.golden["jaccard_and_f"]:
            with self.subTest(case["name"]):
                j, f = jaccard_and_f(np.array(case["pred"]), np.array(case["gt"]), case["tolerance"])
                self.assertAlmostEqual(j, case["expected"][0], places=12)
                self.assertAlmostEqual(f, case["expected"][1], places=12)

    def test_label_propagate(self):
        """Verify propagated labels and distributions on the fixture features."""
        set_precision("float64")
        for case in self.golden["label_propagate"]:
            with self.subTest(case["name"]):
                result = label_propagate(
                    torch.tensor(case["features"], dtype=torch.float64),
                    torch.tensor(case["first_labels"], dtype=torch.float64),
                    k=case["k"],
                    temperature=case.get("temperature", 0.07),
                    context_len=case["context"],
                )
                if "expected_labels" in case:
                    self.assertEqual(result.labels.tolist(), case["expected_labels"])
                if "expected_soft" in case:
                    self.assertTrue(np.allclose(result.soft, np.array(case["expected_soft"]), atol=1e-12))


class TestMaskMetrics(unittest.TestCase):
    """Tests for iou(), boundary_f() and jaccard_and_f()."""

    def test_iou_empty_masks(self):
        """Verify two empty masks score 1."""
        self.assertEqual(iou(np.zeros((4, 4)), np.zeros((4, 4))), 1.0)

    def test_iou_shape_mismatch(self):
        """Verify masks of different shapes raise EvaluationError."""
        with self.assertRaises(EvaluationError):
            iou(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_boundary_empty_cases(self):
        """Verify empty against empty scores 1 and empty against a shape scores 0."""
        empty = np.zeros((10, 10), dtype=bool)
        shape = square(10, 2, 2, 4)
        self.assertEqual(boundary_f(empty, empty), 1.0)
        self.assertEqual(boundary_f(empty, shape), 0.0)
        self.assertEqual(boundary_f(shape, empty), 0.0)

    def test_boundary_shift_within_tolerance(self):
        """Verify a one-pixel shift is forgiven at tolerance 1 but not at 0."""
        pred, gt = square(10, 2, 2, 4), square(10, 3, 2, 4)
        self.assertEqual(boundary_f(pred, gt, 1), 1.0)
        self.assertLess(boundary_f(pred, gt, 0), 1.0)

    def test_boundary_far_apart(self):
        """Verify distant disjoint squares share no boundary."""
        self.assertEqual(boundary_f(square(40, 2, 2, 5), square(40, 30, 30, 5), 1), 0.0)

    def test_default_tolerance(self):
        """Verify the tolerance is the rounded-up fraction of the diagonal."""
        self.assertEqual(default_tolerance((6, 6)), 1)
        self.assertEqual(default_tolerance((480, 854)), 8)

    def test_jaccard_and_f_averages_frames(self):
        """Verify per-frame scores are averaged."""
        gt = np.stack([square(10, 2, 2, 4), square(10, 2, 2, 4)])
        pred = np.stack([square(10, 2, 2, 4), np.zeros((10, 10), dtype=bool)])
        j, f = jaccard_and_f(pred, gt)
        self.assertAlmostEqual(j, 0.5)
        self.assertAlmostEqual(f, 0.5)


class TestMultiObject(unittest.TestCase):
    """Tests for multi_object_eval()."""

    def setUp(self):
        self.gt = np.zeros((2, 8, 8), dtype=np.int64)
        self.gt[:, :4, :4] = 1
        self.gt[:, 4:, 4:] = 2

    def test_relabel_invariance(self):
        """Verify predicted track ids may be any permutation of the truth."""
        pred = np.where(self.gt == 1, 7, np.where(self.gt == 2, 3, 0))
        self.assertEqual(multi_object_eval(pred, self.gt), (1.0, 1.0, 1.0))

    def test_unmatched_track_scores_zero(self):
        """Verify a missing object halves J and F over two objects."""
        pred = np.where(self.gt == 1, 5, 0)
        j, f, jf = multi_object_eval(pred, self.gt)
        self.assertAlmostEqual(j, 0.5)
        self.assertAlmostEqual(f, 0.5)
        self.assertAlmostEqual(jf, 0.5)

    def test_merged_prediction(self):
        """Verify a single track covering both objects is matched to one of them."""
        pred = (self.gt > 0).astype(np.int64)
        j, _, _ = multi_object_eval(pred, self.gt)
        self.assertAlmostEqual(j, 0.25)

    def test_no_ground_truth(self):
        """Verify empty ground truth scores 1 only for an empty prediction."""
        empty = np.zeros((1, 4, 4), dtype=np.int64)
        self.assertEqual(multi_object_eval(empty, empty), (1.0, 1.0, 1.0))
        self.assertEqual(multi_object_eval(empty + 1, empty), (0.0, 0.0, 0.0))


class TestFgAri(unittest.TestCase):
    """Tests for fg_ari()."""

    def test_background_ignored(self):
        """Verify predictions on background pixels do not matter."""
        gt = np.array([0, 0, 1, 1, 2, 2])
        a = fg_ari(np.array([0, 0, 4, 4, 5, 5]), gt)
        b = fg_ari(np.array([9, 4, 4, 4, 5, 5]), gt)
        self.assertEqual(a, 1.0)
        self.assertEqual(a, b)

    def test_undefined_cases_warn(self):
        """Verify single-pixel and single-cluster cases score 0 with a warning."""
        with self.assertWarns(DiagnosticWarning):
            self.assertEqual(fg_ari(np.array([1, 0]), np.array([1, 0])), 0.0)
        with self.assertWarns(DiagnosticWarning):
            self.assertEqual(fg_ari(np.array([2, 2, 2]), np.array([1, 1, 1])), 0.0)

    def test_size_mismatch(self):
        """Verify labelings of different sizes raise EvaluationError."""
        with self.assertRaises(EvaluationError):
            fg_ari(np.zeros(3), np.zeros(4))


class TestLabelPropagation(unittest.TestCase):
    """Tests for label_propagate()."""

    def setUp(self):
        set_precision("float64")

    def test_nearest_neighbor_transfer(self):
        """Verify k=1 with no context copies the label of the closest first-frame patch."""
        eye = torch.eye(3)
        features = torch.stack([eye, eye[[2, 0, 1]]])
        labels = torch.eye(3)
        result = label_propagate(features, labels, k=1, context_len=0)
        self.assertEqual(result.labels.tolist(), [[0, 1, 2], [2, 0, 1]])
        self.assertTrue(np.allclose(result.soft[1], np.eye(3)[[2, 0, 1]]))

    def test_soft_labels_are_distributions(self):
        """Verify propagated rows stay on the simplex."""
        features = torch.randn(4, 9, 5, generator=torch.Generator().manual_seed(0))
        labels = torch.nn.functional.one_hot(torch.arange(9) % 3, 3).double()
        result = label_propagate(features, labels, k=4, context_len=2)
        self.assertEqual(result.soft.shape, (4, 9, 3))
        self.assertTrue(np.allclose(result.soft.sum(axis=-1), 1.0))
        self.assertTrue((result.soft >= 0).all())

    def test_shape_errors(self):
        """Verify mismatched inputs raise EvaluationError."""
        with self.assertRaises(EvaluationError):
            label_propagate(torch.zeros(2, 4, 3), torch.zeros(5, 2))
        with self.assertRaises(EvaluationError):
            label_propagate(torch.zeros(4, 3), torch.zeros(4, 2))

    def test_static_video_keeps_labels(self):
        """Verify identical frames with orthogonal patches reproduce the first labels."""
        features = torch.eye(6).expand(5, 6, 6)
        labels = torch.nn.functional.one_hot(torch.tensor([0, 2, 1, 1, 0, 2]), 3).double()
        result = label_propagate(features, labels, k=10, temperature=0.07, context_len=7)
        for f in range(5):
            self.assertEqual(result.labels[f].tolist(), [0, 2, 1, 1, 0, 2])
        self.assertTrue(np.allclose(result.soft, labels.numpy()[None], atol=1e-4))

    def test_flat_affinity_mixes_uniformly(self):
        """Verify a huge temperature with every key kept averages the first-frame labels."""
        features = torch.randn(4, 8, 5, generator=torch.Generator().manual_seed(1))
        labels = torch.nn.functional.one_hot(torch.tensor([0, 0, 0, 1, 1, 2, 2, 2]), 3).double()
        mean = labels.mean(dim=0).numpy()
        for context in (0, 2):
            with self.subTest(context=context):
                result = label_propagate(features, labels, k=100, temperature=1e9, context_len=context)
                for f in range(1, 4):
                    self.assertTrue(np.allclose(result.soft[f], mean[None], atol=1e-8))

    def test_patch_order_equivariance(self):
        """Verify cyclically relabelling patch positions permutes the output the same way."""
        gen = torch.Generator().manual_seed(2)
        features = torch.randn(4, 9, 5, generator=gen)
        labels = torch.softmax(torch.randn(9, 3, generator=gen), dim=-1)
        base = label_propagate(features, labels, k=4, context_len=2)
        for shift in (1, 4):
            with self.subTest(shift=shift):
                rolled = label_propagate(features.roll(shift, dims=1), labels.roll(shift, dims=0), k=4, context_len=2)
                self.assertTrue(np.allclose(rolled.soft, np.roll(base.soft, shift, axis=1), atol=1e-12))


class TestPropagationScoring(unittest.TestCase):
    """Tests for patch_majority(), propagation_scores() and propagate_video()."""

    def test_patch_majority(self):
        """Verify the most frequent pixel label wins each patch, ties going to the smaller id."""
        labels = np.array(
            [
                [1, 1, 0, 2],
                [1, 0, 2, 0],
                [3, 3, 0, 0],
                [0, 0, 0, 0],
            ]
        )
        self.assertEqual(patch_majority(labels, 2).tolist(), [1, 0, 0, 0])

    def test_scores_take_labels_literally(self):
        """Verify swapped ids score zero even though a track assignment would fix them."""
        gt = np.zeros((2, 10, 10), dtype=np.int64)
        gt[:, 1:4, 1:4] = 1
        gt[:, 6:9, 6:9] = 2
        self.assertEqual(propagation_scores(gt, gt, 1), (1.0, 1.0, 1.0))
        swapped = np.where(gt > 0, 3 - gt, 0)
        j, f, jf = propagation_scores(swapped, gt, 1)
        self.assertEqual((j, f, jf), (0.0, 0.0, 0.0))

    def test_scores_without_objects(self):
        """Verify empty ground truth scores 1 for an empty prediction and 0 otherwise."""
        gt = np.zeros((2, 6, 6), dtype=np.int64)
        self.assertEqual(propagation_scores(gt, gt), (1.0, 1.0, 1.0))
        pred = gt.copy()
        pred[0, 2, 2] = 1
        self.assertEqual(propagation_scores(pred, gt), (0.0, 0.0, 0.0))

    def test_propagate_video(self):
        """Verify a synthetic video yields the three propagation scores in [0, 1]."""
        set_precision("float64")
        seed_everything(0)
        cfg = tiny_config()
        spec = SceneSpec(
            size=16,
            length=3,
            objects=[ObjectSpec(shape=0, size=3.0, color=(220, 70, 60), position=(6.0, 6.0), velocity=(1.0, 0.0))],
        )
        scores = propagate_video(generate_video(spec, "prop_0000"), SlotModel(cfg.model), cfg)
        self.assertEqual(set(scores), {"prop_j", "prop_f", "prop_jf"})
        for value in scores.values():
            self.assertTrue(0.0 <= value <= 1.0)
        self.assertAlmostEqual(scores["prop_jf"], (scores["prop_j"] + scores["prop_f"]) / 2.0, places=12)


class TestCandidateObjects(unittest.TestCase):
    """Tests for candidate_objects() on hand-built attention."""

    def test_masks_follow_masked_weights(self):
        """Verify the winning instance comes from the masked weights A rather than the raw attention M."""
        set_precision("float64")
        cfg = tiny_config()
        cfg.eval.border_background = False
        region = torch.tensor([[[1.0, 1.0, 1.0, 0.0]]])
        attention = torch.tensor([[[[0.55, 0.9, 0.9, 0.5], [0.45, 0.1, 0.1, 0.5]]]])
        masked = attention * region.unsqueeze(-2)
        weights = masked / masked.sum(dim=-1, keepdim=True)
        # patch 0: M favours instance 0, A favours instance 1
        self.assertEqual(int(attention[0, 0, :, 0].argmax()), 0)
        self.assertEqual(int(weights[0, 0, :, 0].argmax()), 1)
        slots = SlotOutput(
            semantic=SemanticOutput(masks=region, centers=torch.tensor([[[1.0, 0.0]]]), weights=region / 3.0),
            binarized=region,
            instance=InstanceOutput(
                slots=torch.tensor([[[[1.0, 0.1], [1.0, -0.1]]]]),
                attention=attention,
                weights=weights,
                init=torch.zeros(1, 1, 2, 2),
            ),
        )
        output = ClipOutput(
            features=torch.zeros(1, 4, 2),
            correlations=torch.zeros(1, 4, 4),
            fused=torch.zeros(1, 4, 2),
            slots=slots,
            partners=[0],
        )
        candidates, background = candidate_objects(output, cfg)
        self.assertEqual(background.tolist(), [[False]])
        self.assertEqual([c.instance for c in candidates[0]], [0, 1])
        self.assertEqual(candidates[0][0].mask.tolist(), [False, True, True, False])
        self.assertEqual(candidates[0][1].mask.tolist(), [True, False, False, False])
        for candidate in candidates[0]:
            self.assertTrue(np.allclose(candidate.attention, weights[0, 0, candidate.instance].numpy()))


class TestCandidateHelpers(unittest.TestCase):
    """Tests for upsample(), border_background() and link_tracks()."""

    def test_upsample(self):
        """Verify each patch becomes a patch_size block."""
        up = upsample(np.arange(4), 2, 3)
        self.assertEqual(up.shape, (6, 6))
        self.assertTrue((up[:3, 3:] == 1).all())
        self.assertTrue((up[3:, :3] == 2).all())

    def test_border_background(self):
        """Verify semantics covering at least half the border are background."""
        border = np.zeros((4, 4), dtype=bool)
        border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
        half = border.copy()
        half[2:, :] = False
        binarized = np.stack([border.reshape(-1), ~border.reshape(-1), half.reshape(-1)])[None]
        self.assertEqual(int(half.sum()), 6)
        self.assertEqual(border_background(binarized, 4).tolist(), [[True, False, True]])

    def test_link_tracks_follows_swaps(self):
        """Verify a slot that moves index keeps its track id."""
        frame0 = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        frame1 = frame0[[1, 0]]
        slots = torch.stack([torch.stack([frame0, frame0]), torch.stack([frame1, frame0])])
        tracks = link_tracks(slots)
        self.assertEqual(tracks.tolist(), [[[0, 1], [2, 3]], [[1, 0], [2, 3]]])

    def test_instance_palette(self):
        """Verify the palette has 256 entries and refuses oversize grids."""
        colors = instance_palette(3, 2)
        self.assertEqual(len(colors), 768)
        self.assertEqual(colors[:3], [0, 0, 0])
        with self.assertRaises(EvaluationError):
            instance_palette(16, 16)


class TestInference(unittest.TestCase):
    """Tests for infer(), export_masks() and evaluate_dataset()."""

    def setUp(self):
        set_precision("float64")
        seed_everything(0)
        self.cfg = tiny_config()
        self.model = SlotModel(self.cfg.model)
        spec = SceneSpec(
            size=16,
            length=3,
            objects=[
                ObjectSpec(shape=1, size=3.0, color=(220, 70, 60), position=(5.0, 5.0), velocity=(1.0, 0.0)),
                ObjectSpec(shape=0, size=3.0, color=(70, 190, 90), position=(11.0, 11.0), velocity=(0.0, -1.0)),
            ],
        )
        self.video = generate_video(spec, "eval_0000")

    def test_infer_maps(self):
        """Verify map shapes and that labels are set exactly on the foreground."""
        result = infer(self.video, self.model, self.cfg)
        self.assertEqual(result.foreground.shape, (3, 16, 16))
        self.assertEqual(result.labels.shape, (3, 16, 16))
        self.assertEqual(result.semantic_map.shape, (3, 16, 16))
        self.assertTrue(np.array_equal(result.labels > 0, result.foreground))
        self.assertTrue(np.array_equal(result.instance_map > 0, result.foreground))
        self.assertTrue((result.semantic_map < self.cfg.model.num_semantics).all())

    def test_candidates_are_disjoint(self):
        """Verify candidate masks in a frame never overlap."""
        result = infer(self.video, self.model, self.cfg)
        for frame in result.candidates:
            if frame:
                self.assertTrue((np.stack([c.mask for c in frame]).sum(axis=0) <= 1).all())

    def test_single_frame_video(self):
        """Verify a one-frame video raises EvaluationError."""
        self.video.frames = self.video.frames[:1]
        self.video.instances = self.video.instances[:1]
        with self.assertRaises(EvaluationError):
            infer(self.video, self.model, self.cfg)

    def test_export_masks(self):
        """Verify one semantic and one instance PNG per frame."""
        result = infer(self.video, self.model, self.cfg)
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp) / "masks"
            export_masks(result, out, 3, 2)
            self.assertEqual(len(list((out / "semantic").iterdir())), 3)
            self.assertEqual(len(list((out / "instance").iterdir())), 3)
            semantic = load_indexed_png(out / "semantic" / "00000.png")
        self.assertTrue(np.array_equal(semantic, result.semantic_map[0] + 1))

    def test_evaluate_and_report(self):
        """Verify the report covers every metric and survives a YAML round trip."""
        for mode in ("single", "multi"):
            with self.subTest(mode):
                self.cfg.eval.mode = mode
                report = evaluate_dataset(self.model, [self.video], self.cfg)
                self.assertEqual(set(report.per_video), {"eval_0000"})
                self.assertEqual(set(report.aggregate), set(METRICS))
                for name in ("iou", "j", "f", "jf"):
                    self.assertTrue(0.0 <= report.aggregate[name] <= 1.0)
                with tempfile.TemporaryDirectory() as tmp:
                    path = Path(tmp) / "metrics.yaml"
                    write_report(report, path)
                    loaded = yaml.safe_load(path.read_text())
                self.assertEqual(loaded["mode"], mode)
                self.assertEqual(loaded["aggregate"], report.aggregate)
                self.assertEqual(report_table(report, per_video=True).row_count, 2)

    def test_empty_report(self):
        """Verify an empty report aggregates to zeros."""
        report = MetricReport(mode="single", fingerprint="x")
        self.assertEqual(report.aggregate, {name: 0.0 for name in METRICS})


if __name__ == "__main__":
    unittest.main()
