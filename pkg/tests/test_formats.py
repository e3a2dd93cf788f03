import json
import math

import numpy as np
import pytest

from proxydet import formats
from proxydet.errors import ConfigError, DataError
from proxydet.evaluation import EvalConfig, evaluate
from proxydet.geometry import Box
from proxydet.head import PARAM_FIELDS, init_head_params
from proxydet.inference import PathologyBox
from proxydet.synth import SynthConfig, generate_dataset


class TestCanonicalJson:
    def test_sorted_keys(self):
        assert formats.canonical_json({"b": 1, "a": 2}) == '{"a":2,"b":1}'

    def test_float_precision(self):
        assert formats.canonical_json(0.1) == "0.10000000000000001"
        assert formats.canonical_json(0.5) == "0.5"
        assert float(formats.canonical_json(1 / 3)) == 1 / 3

    def test_numpy_values(self):
        s = formats.canonical_json({"x": np.float64(0.25), "n": np.int64(3), "a": np.arange(2)})
        assert s == '{"a":[0,1],"n":3,"x":0.25}'

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            formats.canonical_json(float("nan"))

    def test_roundtrip_lossless(self):
        rng = np.random.default_rng(0)
        for v in rng.uniform(-1, 1, size=100):
            assert json.loads(formats.canonical_json(float(v))) == v


def _sample_dataset(tmp_path, **kwargs):
    cfg = SynthConfig(n_images=6, seed=1, region_dropout=0.2, **kwargs)
    scenes = generate_dataset(cfg)
    classes = tuple(cfg.class_names())
    header = formats.DatasetHeader(classes=classes, n_regions=cfg.n_regions, feature_dim=cfg.feature_dim)
    records = [formats.scene_to_record(s, classes) for s in scenes]
    path = tmp_path / "data.jsonl"
    formats.write_dataset(path, header, records)
    return cfg, header, records, path


class TestDatasetRoundTrip:
    def test_lossless(self, tmp_path):
        _, header, records, path = _sample_dataset(tmp_path)
        header2, records2 = formats.read_dataset(path)
        assert header2 == header
        assert len(records2) == len(records)
        for a, b in zip(records, records2):
            assert a.image_id == b.image_id
            for ra, rb in zip(a.regions, b.regions):
                assert ra.region_id == rb.region_id
                assert ra.box == rb.box
                assert ra.presence == rb.presence
                assert np.array_equal(ra.features, rb.features)
            assert a.gt.boxes == b.gt.boxes
            assert a.gt.image_labels == b.gt.image_labels
            assert a.anatomy_labels == b.anatomy_labels

    def test_write_is_deterministic(self, tmp_path):
        _, header, records, path = _sample_dataset(tmp_path)
        other = tmp_path / "again.jsonl"
        formats.write_dataset(other, header, records)
        assert path.read_bytes() == other.read_bytes()

    def test_malformed_line_named(self, tmp_path):
        _, _, _, path = _sample_dataset(tmp_path)
        lines = path.read_text().splitlines()
        lines[2] = lines[2][:-10]
        broken = tmp_path / "broken.jsonl"
        broken.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match=r"broken\.jsonl:3"):
            formats.read_dataset(broken)

    def test_unknown_class_in_probs_named(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        header = '{"kind":"dataset","version":1,"classes":["a"],"n_regions":1,"feature_dim":null}'
        rec = json.dumps(
            {
                "image_id": "x",
                "regions": [
                    {"region_id": 0, "box": [0, 0, 1, 1], "presence": 1.0, "pathology_probs": {"zz": 0.5}}
                ],
            }
        )
        path.write_text(header + "\n" + rec + "\n")
        with pytest.raises(DataError, match=r"bad\.jsonl:2.*zz"):
            formats.read_dataset(path)

    def test_inverted_box_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        header = '{"kind":"dataset","version":1,"classes":["a"],"n_regions":1,"feature_dim":null}'
        rec = json.dumps(
            {"image_id": "x", "regions": [{"region_id": 0, "box": [0.5, 0, 0.2, 1], "presence": 1.0}]}
        )
        path.write_text(header + "\n" + rec + "\n")
        with pytest.raises(DataError, match="bad.jsonl:2"):
            formats.read_dataset(path)

    def test_duplicate_gt_class_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        header = '{"kind":"dataset","version":1,"classes":["a"],"n_regions":1,"feature_dim":null}'
        rec = json.dumps(
            {
                "image_id": "x",
                "regions": [{"region_id": 0, "box": [0, 0, 1, 1], "presence": 1.0}],
                "gt": {
                    "boxes": [
                        {"class": "a", "box": [0, 0, 0.5, 0.5]},
                        {"class": "a", "box": [0.1, 0, 0.5, 0.5]},
                    ],
                    "image_labels": ["a"],
                },
            }
        )
        path.write_text(header + "\n" + rec + "\n")
        with pytest.raises(DataError, match="duplicate"):
            formats.read_dataset(path)

    def test_labels_must_cover_boxes(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        header = '{"kind":"dataset","version":1,"classes":["a"],"n_regions":1,"feature_dim":null}'
        rec = json.dumps(
            {
                "image_id": "x",
                "regions": [{"region_id": 0, "box": [0, 0, 1, 1], "presence": 1.0}],
                "gt": {"boxes": [{"class": "a", "box": [0, 0, 0.5, 0.5]}], "image_labels": []},
            }
        )
        path.write_text(header + "\n" + rec + "\n")
        with pytest.raises(DataError, match="image_labels"):
            formats.read_dataset(path)

    def test_missing_header_rejected(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(DataError, match="header"):
            formats.read_dataset(path)


class TestPredictions:
    def test_roundtrip(self, tmp_path):
        classes = ["a", "b"]
        preds = {
            "img0": [PathologyBox(0, Box(0.1, 0.1, 0.4, 0.4), 0.9)],
            "img1": [PathologyBox(1, Box(0.2, 0.3, 0.5, 0.8), 1 / 3)],
            "img2": [],
        }
        path = tmp_path / "pred.jsonl"
        formats.write_predictions(path, classes, preds)
        classes2, preds2 = formats.read_predictions(path)
        assert classes2 == classes
        assert preds2 == preds

    def test_duplicate_image_rejected(self, tmp_path):
        path = tmp_path / "pred.jsonl"
        lines = [
            '{"kind":"predictions","version":1,"classes":["a"]}',
            '{"image_id":"x","boxes":[]}',
            '{"image_id":"x","boxes":[]}',
        ]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="duplicate"):
            formats.read_predictions(path)


class TestMapping:
    def test_read(self, tmp_path):
        path = tmp_path / "map.json"
        path.write_text(
            json.dumps(
                {
                    "infiltration": {"sources": ["infiltration", "lung_opacity"]},
                    "mass": {"sources": ["mass_nodule"], "combiner": "max"},
                }
            )
        )
        mapping = formats.read_mapping(path)
        assert mapping.eval_classes == ["infiltration", "mass"]
        assert mapping.entries[0].combiner == "mean"
        assert mapping.entries[1].combiner == "max"

    def test_bad_combiner(self, tmp_path):
        path = tmp_path / "map.json"
        path.write_text('{"x": {"sources": ["a"], "combiner": "median"}}')
        with pytest.raises(ConfigError):
            formats.read_mapping(path)

    def test_empty_rejected(self, tmp_path):
        path = tmp_path / "map.json"
        path.write_text("{}")
        with pytest.raises(DataError):
            formats.read_mapping(path)


class TestTrainSampleConversion:
    def test_matrices_built_correctly(self, tmp_path):
        cfg, header, records, _ = _sample_dataset(tmp_path)
        samples = formats.records_to_train_samples(header, records)
        scenes = generate_dataset(cfg)
        for sample, scene in zip(samples, scenes):
            assert np.array_equal(sample.features, scene.features)
            assert np.array_equal(sample.present, scene.present)
            assert np.array_equal(sample.anatomy_labels, scene.anatomy_labels)
            assert np.array_equal(sample.image_labels, scene.image_labels)

    def test_features_required(self, tmp_path):
        _, header, records, _ = _sample_dataset(tmp_path)
        for reg in records[0].regions:
            reg.features = None
        with pytest.raises(ConfigError, match="features"):
            formats.records_to_train_samples(header, records)

    def test_region_id_coverage_enforced(self, tmp_path):
        _, header, records, _ = _sample_dataset(tmp_path)
        records[0].regions[0].region_id = 99
        with pytest.raises(DataError, match="region ids"):
            formats.records_to_train_samples(header, records)


class TestGroundTruthConversion:
    def test_from_records(self, tmp_path):
        cfg, header, records, _ = _sample_dataset(tmp_path)
        gt = formats.ground_truth_from_records(records, list(header.classes))
        assert gt.n_classes == cfg.n_classes
        assert set(gt.images) == {r.image_id for r in records}

    def test_unknown_class_named(self, tmp_path):
        _, header, records, _ = _sample_dataset(tmp_path)
        with pytest.raises(DataError, match="evaluation vocabulary"):
            formats.ground_truth_from_records(records, ["not_a_class"])


class TestCheckpoint:
    def test_roundtrip_exact(self, tmp_path):
        params = init_head_params(6, 3, np.random.default_rng(0))
        meta = formats.CheckpointMeta(mode="loc", classes=("a", "b", "c"), seed=7)
        path = tmp_path / "ck.bin"
        formats.save_checkpoint(path, params, meta)
        loaded, meta2 = formats.load_checkpoint(path)
        assert meta2 == meta
        for name in PARAM_FIELDS:
            assert np.array_equal(loaded.to_dict()[name], params.to_dict()[name])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"hello\n")
        with pytest.raises(DataError, match="magic"):
            formats.load_checkpoint(path)

    def test_truncated(self, tmp_path):
        params = init_head_params(4, 2, np.random.default_rng(0))
        meta = formats.CheckpointMeta(mode="loc", classes=("a", "b"), seed=0)
        path = tmp_path / "ck.bin"
        formats.save_checkpoint(path, params, meta)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(DataError, match="truncated"):
            formats.load_checkpoint(path)

    def test_deterministic_bytes(self, tmp_path):
        params = init_head_params(4, 2, np.random.default_rng(1))
        meta = formats.CheckpointMeta(mode="mil", classes=("a", "b"), seed=1)
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        formats.save_checkpoint(p1, params, meta)
        formats.save_checkpoint(p2, params, meta)
        assert p1.read_bytes() == p2.read_bytes()


class TestReports:
    def _report(self, tmp_path):
        from proxydet.evaluation import GroundTruth, GtImage

        b = Box(0.2, 0.2, 0.6, 0.6)
        gt = GroundTruth(
            images={"a": GtImage(boxes={0: b}, labels=frozenset({0}))}, n_classes=2
        )
        preds = {"a": [PathologyBox(0, b, 0.9)]}
        return evaluate(preds, gt, EvalConfig(), class_names=["x", "y"])

    def test_json_deterministic_and_sorted(self, tmp_path):
        report = self._report(tmp_path)
        p1, p2 = tmp_path / "r1.json", tmp_path / "r2.json"
        formats.write_report_json(p1, report)
        formats.write_report_json(p2, report)
        assert p1.read_bytes() == p2.read_bytes()
        obj = json.loads(p1.read_text())
        assert obj["overall"]["map"] == 1.0
        assert obj["classes"]["y"]["map"] is None

    def test_csv_layout(self, tmp_path):
        report = self._report(tmp_path)
        path = tmp_path / "r.csv"
        formats.write_report_csv(path, report)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("class,ap@0.10")
        assert lines[1].startswith("x,")
        assert lines[2].startswith("y,")
        assert lines[3].startswith("overall,")
        # undefined AP cells are empty
        assert ",," in lines[2]

    def test_history_csv(self, tmp_path):
        from proxydet.head import LossBreakdown

        rows = [(0, LossBreakdown(1.5, 1.0, 0.5, 0.25, 0.25, 0.1, 0.0))]
        path = tmp_path / "h.csv"
        formats.write_history_csv(path, rows)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,total,detection,presence_bce,l1,giou_penalty,loc_asl,mil_asl"
        assert lines[1] == "0,1.5,1,0.5,0.25,0.25,0.10000000000000001,0"
