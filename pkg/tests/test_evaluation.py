import numpy as np
import pytest

from helpers import ap_oracle, random_box

from proxydet.errors import DataError
from proxydet.evaluation import (
    EvalConfig,
    GroundTruth,
    GtImage,
    average_precision,
    evaluate,
    localization_accuracy,
    mean_ap,
)
from proxydet.geometry import Box
from proxydet.inference import PathologyBox

B = Box(0.2, 0.2, 0.6, 0.6)
B_NEAR = Box(0.22, 0.2, 0.62, 0.6)  # IoU well above 0.5 with B
B_FAR = Box(0.7, 0.7, 0.9, 0.9)


class TestAveragePrecision:
    def test_single_match(self):
        assert average_precision([("a", B, 0.9)], {"a": B}, 0.5) == 1.0

    def test_no_predictions(self):
        assert average_precision([], {"a": B}, 0.5) == 0.0

    def test_no_ground_truth_undefined(self):
        assert average_precision([("a", B, 0.9)], {}, 0.5) is None

    def test_three_image_example(self):
        # scores 0.9 (match), 0.8 (miss), 0.7 (match) with 3 GT boxes:
        # AP = (1/3)*1 + (1/3)*(2/3) = 5/9
        preds = [("a", B, 0.9), ("b", B_FAR, 0.8), ("c", B, 0.7)]
        gt = {"a": B, "b": B, "c": B}
        got = average_precision(preds, gt, 0.5)
        assert got == pytest.approx(5 / 9, abs=1e-12)
        assert got == pytest.approx(ap_oracle(preds, gt, 0.5), abs=1e-12)

    def test_ties_broken_by_image_id(self):
        preds = [("b", B_FAR, 0.8), ("a", B, 0.8)]
        gt = {"a": B, "b": B}
        # "a" ranks first on the tie: TP at rank 1, FP at rank 2 -> AP = 1/2
        assert average_precision(preds, gt, 0.5) == pytest.approx(0.5, abs=1e-12)

    def test_match_uses_iou_at_or_above_threshold(self):
        from helpers import iou_ref

        thr = iou_ref(B, B_NEAR)
        assert average_precision([("a", B_NEAR, 0.9)], {"a": B}, thr) == 1.0

    def _random_instance(self, rng):
        images = [f"img{i}" for i in range(int(rng.integers(1, 6)))]
        gt = {img: random_box(rng, 0.05) for img in images if rng.random() < 0.7}
        preds = [
            (img, random_box(rng, 0.05), float(rng.uniform(0, 1)))
            for img in images
            if rng.random() < 0.8
        ]
        return preds, gt

    def test_matches_oracle_on_random_instances(self):
        rng = np.random.default_rng(0)
        checked = 0
        for _ in range(300):
            preds, gt = self._random_instance(rng)
            for thr in (0.1, 0.3, 0.5, 0.7):
                got = average_precision(preds, gt, thr)
                want = ap_oracle(preds, gt, thr)
                if want is None:
                    assert got is None
                else:
                    assert got == pytest.approx(want, abs=1e-9)
                    checked += 1
        assert checked > 200

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            preds, gt = self._random_instance(rng)
            if not gt:
                continue
            values = [average_precision(preds, gt, t) for t in (0.1, 0.3, 0.5, 0.7)]
            assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))


def _gt(images: dict) -> GroundTruth:
    return GroundTruth(
        images={
            k: GtImage(boxes=v, labels=frozenset(v.keys())) for k, v in images.items()
        },
        n_classes=2,
    )


def _pred(img_boxes: dict) -> dict:
    return {
        img: [PathologyBox(class_id=c, box=b, score=s) for c, b, s in entries]
        for img, entries in img_boxes.items()
    }


class TestMeanAp:
    def test_constant_ap_one(self):
        gt = _gt({"a": {0: B}, "b": {0: B}})
        preds = _pred({"a": [(0, B, 0.9)], "b": [(0, B, 0.8)]})
        ap, class_map, overall = mean_ap(preds, gt)
        assert class_map[0] == 1.0
        assert class_map[1] is None  # no ground truth for class 1
        assert overall == 1.0

    def test_partial_threshold_vector(self):
        # AP 1.0 at 0.1-0.3 and 0 above -> class mAP = 3/7
        gt = _gt({"a": {0: B}})
        shifted = Box(0.3, 0.3, 0.7, 0.7)
        preds = _pred({"a": [(0, shifted, 0.9)]})
        from helpers import iou_ref

        v = iou_ref(B, shifted)
        assert 0.3 <= v < 0.4
        _, class_map, _ = mean_ap(preds, gt)
        assert class_map[0] == pytest.approx(3 / 7, abs=1e-12)


class TestLocalizationAccuracy:
    def test_perfect(self):
        gt = _gt({"a": {0: B}, "b": {0: B}})
        preds = _pred({"a": [(0, B, 1.0)], "b": [(0, B, 1.0)]})
        assert localization_accuracy(preds, gt, 0, 0.5, 0.7) == 1.0

    def test_nothing_fires_half_have_gt(self):
        gt = _gt({"a": {0: B}, "b": {}})
        assert localization_accuracy({}, gt, 0, 0.5, 0.7) == 0.5

    def test_four_image_hand_count(self):
        gt = _gt({"a": {0: B}, "b": {0: B}, "c": {}, "d": {}})
        preds = _pred(
            {
                "a": [(0, B_NEAR, 0.9)],  # fires, matches -> correct
                "b": [(0, B_FAR, 0.9)],  # fires, misses -> wrong
                "c": [],  # no fire, no gt -> correct
                "d": [(0, B, 0.9)],  # fires, no gt -> wrong
            }
        )
        assert localization_accuracy(preds, gt, 0, 0.5, 0.7) == 0.5

    def test_score_threshold_gates_firing(self):
        gt = _gt({"a": {0: B}, "b": {}})
        preds = _pred({"a": [(0, B, 0.6)], "b": [(0, B, 0.6)]})
        # below the 0.7 firing bar: positive image missed, negative correct
        assert localization_accuracy(preds, gt, 0, 0.5, 0.7) == 0.5
        # at 0.5 both fire: positive hit, negative false-fires
        assert localization_accuracy(preds, gt, 0, 0.5, 0.5) == 0.5

    def test_positives_only_variant(self):
        gt = _gt({"a": {0: B}, "b": {}, "c": {}})
        preds = _pred({"a": [(0, B, 0.9)], "b": [(0, B, 0.9)]})
        assert localization_accuracy(preds, gt, 0, 0.5, 0.7, positives_only=True) == 1.0
        # full variant: a correct (hit), b wrong (false fire), c correct (quiet)
        assert localization_accuracy(preds, gt, 0, 0.5, 0.7) == pytest.approx(2 / 3)

    def test_monotone_in_iou_threshold(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            images = {}
            preds = {}
            for i in range(5):
                img = f"i{i}"
                images[img] = {0: random_box(rng, 0.05)} if rng.random() < 0.6 else {}
                if rng.random() < 0.8:
                    preds[img] = [(0, random_box(rng, 0.05), float(rng.uniform(0, 1)))]
            gt = _gt(images)
            p = _pred(preds)
            vals = [localization_accuracy(p, gt, 0, t, 0.7) for t in (0.1, 0.3, 0.5)]
            assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))


class TestEvaluate:
    def test_unknown_image_id_rejected(self):
        gt = _gt({"a": {0: B}})
        preds = _pred({"zzz": [(0, B, 0.9)]})
        with pytest.raises(DataError, match="zzz"):
            evaluate(preds, gt)

    def test_duplicate_class_rejected(self):
        gt = _gt({"a": {0: B}})
        preds = {"a": [PathologyBox(0, B, 0.9), PathologyBox(0, B_FAR, 0.4)]}
        with pytest.raises(DataError, match="more than one"):
            evaluate(preds, gt)

    def test_report_invariants(self):
        rng = np.random.default_rng(3)
        images = {}
        preds = {}
        for i in range(20):
            img = f"i{i}"
            boxes = {}
            for c in range(2):
                if rng.random() < 0.5:
                    boxes[c] = random_box(rng, 0.05)
            images[img] = boxes
            preds[img] = [
                (c, random_box(rng, 0.05), float(rng.uniform(0, 1))) for c in range(2)
            ]
        report = evaluate(_pred(preds), _gt(images))
        for cls in report.ap:
            for v in report.ap[cls].values():
                assert v is None or 0.0 <= v <= 1.0
            for v in report.loc_acc[cls].values():
                assert 0.0 <= v <= 1.0
        defined = [v for v in report.class_map.values() if v is not None]
        assert report.overall_map == sum(defined) / len(defined)
        assert report.counts.images == 20
        assert report.counts.predictions == 40

    def test_gt_image_label_superset_enforced(self):
        with pytest.raises(DataError):
            GtImage(boxes={0: B}, labels=frozenset())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EvalConfig(iou_thresholds=(0.0, 0.5))
        with pytest.raises(ValueError):
            EvalConfig(locacc_score_threshold=1.5)

    def test_class_names_in_report(self):
        gt = _gt({"a": {0: B}})
        report = evaluate(_pred({"a": [(0, B, 0.9)]}), gt, class_names=["x", "y"])
        assert report.class_names == ("x", "y")
        with pytest.raises(ValueError):
            evaluate(_pred({"a": [(0, B, 0.9)]}), gt, class_names=["x"])
