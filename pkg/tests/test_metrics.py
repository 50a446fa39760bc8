"""Metric contracts: Dice/IoU enumeration oracles, the dsc/iou identity,
HD95 against an all-pairs brute-force oracle, and report plumbing."""

import numpy as np
import pytest

from sfunet import ModelConfig, RealTensor4, SFUNet, ShapeError, DataError
from sfunet import metrics
from sfunet.data import SegmentationSample

from oracles import boundary_loop, hd95_bruteforce


class TestDsc:
    def test_identical_nonempty(self):
        m = np.zeros((4, 4), bool)
        m[1:3, 1:3] = True
        assert metrics.dsc(m, m) == 1.0

    def test_disjoint_nonempty(self):
        a = np.zeros((4, 4), bool)
        b = np.zeros((4, 4), bool)
        a[0, 0] = True
        b[3, 3] = True
        assert metrics.dsc(a, b) == 0.0

    def test_enumerated_overlap(self):
        a = np.zeros((4, 4), bool)
        b = np.zeros((4, 4), bool)
        a[0, :4] = True            # |P| = 4
        b[0, 2:] = True            # overlap 2
        b[1, :2] = True            # |G| = 4
        assert metrics.dsc(a, b) == 0.5

    def test_both_empty(self):
        z = np.zeros((3, 3), bool)
        assert metrics.dsc(z, z) == 1.0

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            metrics.dsc(np.zeros((3, 3), bool), np.zeros((3, 4), bool))


class TestIou:
    def test_identical(self):
        m = np.ones((2, 2), bool)
        assert metrics.iou(m, m) == 1.0

    def test_enumeration(self):
        a = np.zeros((4, 4), bool)
        b = np.zeros((4, 4), bool)
        a[0, :4] = True
        b[0, 2:] = True
        b[1, :2] = True
        assert metrics.iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-15)

    def test_identity_with_dsc(self, rng):
        for _ in range(50):
            a = rng.random((8, 8)) < 0.4
            b = rng.random((8, 8)) < 0.4
            d = metrics.dsc(a, b)
            i = metrics.iou(a, b)
            assert abs(i - d / (2.0 - d)) < 1e-12


class TestHd95:
    def test_identical_masks(self):
        m = np.zeros((8, 8), bool)
        m[2:5, 3:6] = True
        assert metrics.hd95(m, m) == 0.0

    def test_two_points_distance_five(self):
        a = np.zeros((12, 12), bool)
        b = np.zeros((12, 12), bool)
        a[2, 2] = True
        b[5, 6] = True  # 3-4-5 triangle
        assert metrics.hd95(a, b) == pytest.approx(5.0, abs=1e-12)

    def test_empty_conventions(self):
        z = np.zeros((6, 8), bool)
        m = np.zeros((6, 8), bool)
        m[2, 2] = True
        assert metrics.hd95(z, z) == 0.0
        assert metrics.hd95(m, z) == pytest.approx(np.hypot(6, 8), abs=1e-12)
        assert metrics.hd95(z, m) == pytest.approx(np.hypot(6, 8), abs=1e-12)

    def test_boundary_matches_loop_oracle(self, rng):
        for _ in range(20):
            m = rng.random((9, 7)) < 0.5
            np.testing.assert_array_equal(metrics.boundary(m), boundary_loop(m))

    def test_random_masks_match_bruteforce(self, rng):
        for _ in range(60):
            h = int(rng.integers(2, 17))
            w = int(rng.integers(2, 17))
            a = rng.random((h, w)) < rng.uniform(0.1, 0.6)
            b = rng.random((h, w)) < rng.uniform(0.1, 0.6)
            assert abs(metrics.hd95(a, b) - hd95_bruteforce(a, b)) < 1e-9

    def test_flip_invariance(self, rng):
        a = rng.random((10, 10)) < 0.35
        b = rng.random((10, 10)) < 0.35
        for flip in (np.fliplr, np.flipud):
            assert metrics.hd95(flip(a), flip(b)) == pytest.approx(metrics.hd95(a, b), abs=1e-12)
            assert metrics.dsc(flip(a), flip(b)) == metrics.dsc(a, b)
            assert metrics.iou(flip(a), flip(b)) == metrics.iou(a, b)


class TestReports:
    def test_perfect_predictions(self):
        labels = [np.array([[0, 1], [2, 0]]), np.array([[2, 2], [1, 0]])]
        report = metrics.report_from_masks(labels, labels, n_classes=3)
        assert report.class_ids == [1, 2]
        assert report.dsc == [1.0, 1.0] and report.iou == [1.0, 1.0] and report.hd95 == [0.0, 0.0]

    def test_binary_single_foreground_row(self):
        labels = [np.array([[0, 1], [1, 0]])]
        report = metrics.report_from_masks(labels, labels, n_classes=2)
        assert report.class_ids == [1]
        assert "class\tdsc\tiou\thd95" in report.to_tsv()
        assert report.to_tsv().count("\n") == 3  # header + class row + mean row

    def test_four_class_mean_is_arithmetic(self, rng):
        preds = [rng.integers(0, 4, (8, 8)) for _ in range(3)]
        gts = [rng.integers(0, 4, (8, 8)) for _ in range(3)]
        report = metrics.report_from_masks(preds, gts, n_classes=4)
        assert abs(report.mean_iou - np.mean(report.iou)) < 1e-12
        assert abs(report.mean_dsc - np.mean(report.dsc)) < 1e-12

    def test_kv_serialization(self):
        labels = [np.array([[0, 1], [1, 0]])]
        report = metrics.report_from_masks(labels, labels, n_classes=2)
        kv = report.to_kv()
        assert "dsc_class1: 1.000000" in kv and "mean_iou: 1.000000" in kv

    def test_empty_split_rejected(self):
        with pytest.raises(DataError):
            metrics.report_from_masks([], [], 2)


class TestEvaluate:
    def test_evaluate_runs_model_argmax(self, rng):
        cfg = ModelConfig(input_channels=1, n_classes=2, input_hw=(16, 16), precision="double")
        model = SFUNet(cfg, seed=0)
        samples = []
        for i in range(3):
            image = rng.uniform(0, 1, (1, 1, 16, 16))
            label = rng.integers(0, 2, (16, 16))
            samples.append(SegmentationSample(RealTensor4(image), label, f"s{i}"))
        report = metrics.evaluate(model, samples, 2, batch_size=2)
        expected_preds = [
            np.argmax(model.forward(RealTensor4(s.image.data)).data, axis=1)[0] for s in samples
        ]
        manual = metrics.report_from_masks(expected_preds, [s.label for s in samples], 2)
        assert report.dsc == manual.dsc and report.iou == manual.iou and report.hd95 == manual.hd95

    def test_empty_split(self):
        cfg = ModelConfig(input_channels=1, n_classes=2, input_hw=(16, 16))
        model = SFUNet(cfg, seed=0)
        with pytest.raises(DataError):
            metrics.evaluate(model, [], 2)
