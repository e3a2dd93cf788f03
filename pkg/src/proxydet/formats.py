"""File formats: JSONL datasets and predictions, mapping files, checkpoints, reports.

Every writer is byte-deterministic: JSON keys are emitted in sorted
order, floats are printed with 17 significant digits (lossless for
doubles), and no timestamps or environment details leak into outputs.
Dataset and prediction files are self-describing — the first JSONL line
is a header record declaring the class vocabulary.

Readers reject malformed input with errors naming the file, line, and
field.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .evaluation import EvalReport, GroundTruth, GtImage
from .geometry import Box, corner_to_center
from .head import PARAM_FIELDS, HeadParams, LossBreakdown, TrainSample
from .inference import ClassMapping, MappingEntry, PathologyBox, RegionDetection

FORMAT_VERSION = 1
_CHECKPOINT_MAGIC = b"proxydet-checkpoint-v1\n"


# ---------------------------------------------------------------------------
# canonical JSON
# ---------------------------------------------------------------------------


def canonical_json(obj) -> str:
    """Serialize with sorted keys and 17-significant-digit floats."""
    parts: list[str] = []
    _canon(obj, parts)
    return "".join(parts)


def _canon(obj, parts: list[str]) -> None:
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, (np.integer,)):
        obj = int(obj)
    if obj is None:
        parts.append("null")
    elif isinstance(obj, bool):
        parts.append("true" if obj else "false")
    elif isinstance(obj, int):
        parts.append(str(obj))
    elif isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError("cannot serialize non-finite float")
        parts.append(format(obj, ".17g"))
    elif isinstance(obj, str):
        parts.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, (list, tuple)):
        parts.append("[")
        for i, v in enumerate(obj):
            if i:
                parts.append(",")
            _canon(v, parts)
        parts.append("]")
    elif isinstance(obj, dict):
        parts.append("{")
        for i, k in enumerate(sorted(obj)):
            if not isinstance(k, str):
                raise ValueError(f"JSON object keys must be strings, got {type(k)}")
            if i:
                parts.append(",")
            parts.append(json.dumps(k, ensure_ascii=False))
            parts.append(":")
            _canon(obj[k], parts)
        parts.append("}")
    else:
        raise ValueError(f"cannot serialize type {type(obj)}")


# ---------------------------------------------------------------------------
# dataset records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetHeader:
    classes: tuple[str, ...]
    n_regions: int
    feature_dim: int | None = None

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise DataError("duplicate class names in header")
        if not self.classes:
            raise DataError("header declares no classes")


@dataclass(eq=False)
class RegionRecord:
    region_id: int
    box: Box
    presence: float
    features: np.ndarray | None = None
    pathology_probs: np.ndarray | None = None  # aligned with the header classes


@dataclass(eq=False)
class GtRecord:
    boxes: list[tuple[str, Box]]
    image_labels: list[str]


@dataclass(eq=False)
class ImageRecord:
    image_id: str
    regions: list[RegionRecord]
    gt: GtRecord | None = None
    anatomy_labels: dict[int, list[str]] | None = None


def _require(condition: bool, where: str, message: str) -> None:
    if not condition:
        raise DataError(f"{where}: {message}")


def _parse_box(value, where: str) -> Box:
    _require(isinstance(value, list) and len(value) == 4, where, "box must be a 4-element array")
    try:
        return Box(*(float(v) for v in value))
    except (TypeError, ValueError) as exc:
        raise DataError(f"{where}: {exc}") from exc


def _parse_probs(value, classes: tuple[str, ...], where: str) -> np.ndarray:
    _require(isinstance(value, dict), where, "pathology_probs must be an object")
    index = {name: i for i, name in enumerate(classes)}
    out = np.zeros(len(classes))
    for name, p in value.items():
        if name not in index:
            raise DataError(f"{where}: unknown class name {name!r}")
        p = float(p)
        _require(0.0 <= p <= 1.0, where, f"probability for {name!r} outside [0, 1]")
        out[index[name]] = p
    return out


def _iter_jsonl(path: str | Path):
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield line_no, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: malformed JSON: {exc.msg}") from exc


def read_dataset(path: str | Path) -> tuple[DatasetHeader, list[ImageRecord]]:
    """Read a dataset JSONL file (header line plus one record per image)."""
    path = Path(path)
    header: DatasetHeader | None = None
    records: list[ImageRecord] = []
    for line_no, obj in _iter_jsonl(path):
        where = f"{path}:{line_no}"
        if header is None:
            _require(obj.get("kind") == "dataset", where, "first record must be a dataset header")
            _require(obj.get("version") == FORMAT_VERSION, where, "unsupported format version")
            try:
                header = DatasetHeader(
                    classes=tuple(obj["classes"]),
                    n_regions=int(obj["n_regions"]),
                    feature_dim=None if obj.get("feature_dim") is None else int(obj["feature_dim"]),
                )
            except KeyError as exc:
                raise DataError(f"{where}: header missing field {exc}") from exc
            continue
        records.append(_parse_image_record(obj, header, where))
    _require(header is not None, str(path), "empty file (missing header)")
    return header, records


def _parse_image_record(obj, header: DatasetHeader, where: str) -> ImageRecord:
    _require("image_id" in obj, where, "missing image_id")
    _require("regions" in obj and isinstance(obj["regions"], list), where, "missing regions array")
    regions = []
    for i, reg in enumerate(obj["regions"]):
        rwhere = f"{where}: regions[{i}]"
        _require(isinstance(reg, dict), rwhere, "must be an object")
        _require("region_id" in reg, rwhere, "missing region_id")
        presence = float(reg.get("presence", 1.0))
        _require(0.0 <= presence <= 1.0, rwhere, "presence outside [0, 1]")
        features = None
        if reg.get("features") is not None:
            features = np.asarray([float(v) for v in reg["features"]], dtype=np.float64)
            if header.feature_dim is not None:
                _require(
                    features.shape[0] == header.feature_dim,
                    rwhere,
                    f"features length {features.shape[0]} != header feature_dim {header.feature_dim}",
                )
        probs = None
        if reg.get("pathology_probs") is not None:
            probs = _parse_probs(reg["pathology_probs"], header.classes, rwhere)
        regions.append(
            RegionRecord(
                region_id=int(reg["region_id"]),
                box=_parse_box(reg.get("box"), rwhere),
                presence=presence,
                features=features,
                pathology_probs=probs,
            )
        )
    gt = None
    if obj.get("gt") is not None:
        gwhere = f"{where}: gt"
        gobj = obj["gt"]
        boxes = []
        seen = set()
        for i, entry in enumerate(gobj.get("boxes", [])):
            name = entry.get("class")
            _require(name in header.classes, f"{gwhere}.boxes[{i}]", f"unknown class name {name!r}")
            _require(name not in seen, f"{gwhere}.boxes[{i}]", f"duplicate box for class {name!r}")
            seen.add(name)
            boxes.append((name, _parse_box(entry.get("box"), f"{gwhere}.boxes[{i}]")))
        labels = list(gobj.get("image_labels", []))
        for name in labels:
            _require(name in header.classes, gwhere, f"unknown class name {name!r} in image_labels")
        _require(
            seen.issubset(labels),
            gwhere,
            "image_labels must include every class with a ground-truth box",
        )
        gt = GtRecord(boxes=boxes, image_labels=labels)
    anatomy = None
    if obj.get("anatomy_labels") is not None:
        awhere = f"{where}: anatomy_labels"
        anatomy = {}
        for key, names in obj["anatomy_labels"].items():
            try:
                rid = int(key)
            except ValueError as exc:
                raise DataError(f"{awhere}: region key {key!r} is not an integer") from exc
            for name in names:
                _require(name in header.classes, awhere, f"unknown class name {name!r}")
            anatomy[rid] = list(names)
    return ImageRecord(
        image_id=str(obj["image_id"]), regions=regions, gt=gt, anatomy_labels=anatomy
    )


def write_dataset(path: str | Path, header: DatasetHeader, records: list[ImageRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(
            canonical_json(
                {
                    "kind": "dataset",
                    "version": FORMAT_VERSION,
                    "classes": list(header.classes),
                    "n_regions": header.n_regions,
                    "feature_dim": header.feature_dim,
                }
            )
            + "\n"
        )
        for rec in records:
            fh.write(canonical_json(_image_record_to_obj(rec, header)) + "\n")


def _image_record_to_obj(rec: ImageRecord, header: DatasetHeader) -> dict:
    regions = []
    for reg in rec.regions:
        obj: dict = {
            "region_id": reg.region_id,
            "box": list(reg.box.as_tuple()),
            "presence": reg.presence,
        }
        if reg.features is not None:
            obj["features"] = [float(v) for v in reg.features]
        if reg.pathology_probs is not None:
            obj["pathology_probs"] = {
                name: float(p) for name, p in zip(header.classes, reg.pathology_probs)
            }
        regions.append(obj)
    out: dict = {"image_id": rec.image_id, "regions": regions}
    if rec.gt is not None:
        out["gt"] = {
            "boxes": [
                {"class": name, "box": list(box.as_tuple())} for name, box in rec.gt.boxes
            ],
            "image_labels": list(rec.gt.image_labels),
        }
    if rec.anatomy_labels is not None:
        out["anatomy_labels"] = {
            str(rid): list(names) for rid, names in rec.anatomy_labels.items()
        }
    return out


# ---------------------------------------------------------------------------
# predictions
# ---------------------------------------------------------------------------


def write_predictions(
    path: str | Path, classes: list[str], predictions: dict[str, list[PathologyBox]]
) -> None:
    """Write per-image pathology boxes; image order follows the input dict."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(
            canonical_json(
                {"kind": "predictions", "version": FORMAT_VERSION, "classes": list(classes)}
            )
            + "\n"
        )
        for image_id, boxes in predictions.items():
            fh.write(
                canonical_json(
                    {
                        "image_id": image_id,
                        "boxes": [
                            {
                                "class": classes[b.class_id],
                                "box": list(b.box.as_tuple()),
                                "score": b.score,
                            }
                            for b in boxes
                        ],
                    }
                )
                + "\n"
            )


def read_predictions(path: str | Path) -> tuple[list[str], dict[str, list[PathologyBox]]]:
    path = Path(path)
    classes: list[str] | None = None
    index: dict[str, int] = {}
    out: dict[str, list[PathologyBox]] = {}
    for line_no, obj in _iter_jsonl(path):
        where = f"{path}:{line_no}"
        if classes is None:
            _require(obj.get("kind") == "predictions", where, "first record must be a predictions header")
            _require(obj.get("version") == FORMAT_VERSION, where, "unsupported format version")
            classes = list(obj["classes"])
            index = {name: i for i, name in enumerate(classes)}
            continue
        _require("image_id" in obj, where, "missing image_id")
        image_id = str(obj["image_id"])
        _require(image_id not in out, where, f"duplicate image id {image_id!r}")
        boxes = []
        for i, entry in enumerate(obj.get("boxes", [])):
            bwhere = f"{where}: boxes[{i}]"
            name = entry.get("class")
            if name not in index:
                raise DataError(f"{bwhere}: unknown class name {name!r}")
            score = float(entry.get("score", 0.0))
            _require(0.0 <= score <= 1.0, bwhere, "score outside [0, 1]")
            boxes.append(
                PathologyBox(
                    class_id=index[name], box=_parse_box(entry.get("box"), bwhere), score=score
                )
            )
        out[image_id] = boxes
    _require(classes is not None, str(path), "empty file (missing header)")
    return classes, out


# ---------------------------------------------------------------------------
# mapping files
# ---------------------------------------------------------------------------


def read_mapping(path: str | Path) -> ClassMapping:
    """Read a JSON mapping file: eval class -> {sources: [...], combiner: mean|max}."""
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON: {exc.msg}") from exc
    if not isinstance(obj, dict) or not obj:
        raise DataError(f"{path}: mapping must be a non-empty object")
    entries = []
    for eval_class, spec in obj.items():
        if not isinstance(spec, dict) or "sources" not in spec:
            raise DataError(f"{path}: entry {eval_class!r} must be an object with 'sources'")
        entries.append(
            MappingEntry(
                eval_class=eval_class,
                sources=tuple(spec["sources"]),
                combiner=spec.get("combiner", "mean"),
            )
        )
    return ClassMapping(tuple(entries))


# ---------------------------------------------------------------------------
# converters
# ---------------------------------------------------------------------------


def records_to_train_samples(
    header: DatasetHeader, records: list[ImageRecord]
) -> list[TrainSample]:
    """Build training samples; requires features and uniform region sets.

    Region ids must be exactly 0..n_regions-1 within each record (rows are
    ordered by region id). Anatomy and image labels are converted to
    matrices over the header vocabulary where available.
    """
    samples = []
    index = {name: i for i, name in enumerate(header.classes)}
    n_classes = len(header.classes)
    for rec in records:
        ids = sorted(reg.region_id for reg in rec.regions)
        if ids != list(range(header.n_regions)):
            raise DataError(
                f"image {rec.image_id!r}: region ids must be exactly 0..{header.n_regions - 1}"
            )
        by_id = {reg.region_id: reg for reg in rec.regions}
        ordered = [by_id[i] for i in range(header.n_regions)]
        if any(reg.features is None for reg in ordered):
            raise ConfigError(f"image {rec.image_id!r}: training requires region features")
        features = np.stack([reg.features for reg in ordered])
        boxes = np.stack([corner_to_center(reg.box).to_array() for reg in ordered])
        present = np.array([reg.presence >= 0.5 for reg in ordered])
        anatomy = None
        if rec.anatomy_labels is not None:
            anatomy = np.zeros((header.n_regions, n_classes))
            for rid, names in rec.anatomy_labels.items():
                if rid not in by_id:
                    raise DataError(
                        f"image {rec.image_id!r}: anatomy_labels references unknown region {rid}"
                    )
                for name in names:
                    anatomy[rid, index[name]] = 1.0
        image_labels = None
        if rec.gt is not None:
            image_labels = np.zeros(n_classes)
            for name in rec.gt.image_labels:
                image_labels[index[name]] = 1.0
        samples.append(
            TrainSample(
                features=features,
                target_boxes=boxes,
                present=present,
                anatomy_labels=anatomy,
                image_labels=image_labels,
            )
        )
    return samples


def record_to_detections(rec: ImageRecord, header: DatasetHeader) -> list[RegionDetection]:
    """Turn a record's stored probabilities into region detections (no model)."""
    detections = []
    for reg in rec.regions:
        if reg.pathology_probs is None:
            raise ConfigError(
                f"image {rec.image_id!r}: region {reg.region_id} has no pathology_probs; "
                "provide a checkpoint or store probabilities in the dataset"
            )
        detections.append(
            RegionDetection(
                region_id=reg.region_id,
                box=reg.box,
                presence=reg.presence,
                pathology_probs=reg.pathology_probs,
            )
        )
    return detections


def ground_truth_from_records(
    records: list[ImageRecord], classes: list[str]
) -> GroundTruth:
    """Collect ground truth over the given evaluation vocabulary.

    Every ground-truth class name must be in ``classes``; offending image
    ids are named otherwise.
    """
    index = {name: i for i, name in enumerate(classes)}
    images: dict[str, GtImage] = {}
    for rec in records:
        boxes: dict[int, Box] = {}
        labels: set[int] = set()
        if rec.gt is not None:
            for name, box in rec.gt.boxes:
                if name not in index:
                    raise DataError(
                        f"image {rec.image_id!r}: ground-truth class {name!r} is not in the "
                        "evaluation vocabulary"
                    )
                boxes[index[name]] = box
            for name in rec.gt.image_labels:
                if name not in index:
                    raise DataError(
                        f"image {rec.image_id!r}: image label {name!r} is not in the "
                        "evaluation vocabulary"
                    )
                labels.add(index[name])
        images[rec.image_id] = GtImage(boxes=boxes, labels=frozenset(labels))
    return GroundTruth(images=images, n_classes=len(classes))


def scene_to_record(scene, classes: tuple[str, ...]) -> ImageRecord:
    """Convert a synthetic scene into the dataset record schema."""
    regions = [
        RegionRecord(
            region_id=i,
            box=scene.region_boxes[i],
            presence=1.0 if scene.present[i] else 0.0,
            features=scene.features[i],
        )
        for i in range(len(scene.region_boxes))
    ]
    gt = GtRecord(
        boxes=[(classes[b.class_id], b.box) for b in scene.gt_boxes],
        image_labels=[
            classes[c] for c in range(len(classes)) if scene.image_labels[c] > 0
        ],
    )
    anatomy = {
        rid: [classes[c] for c in range(len(classes)) if scene.anatomy_labels[rid, c] > 0]
        for rid in range(scene.anatomy_labels.shape[0])
    }
    return ImageRecord(
        image_id=scene.image_id, regions=regions, gt=gt, anatomy_labels=anatomy
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CheckpointMeta:
    mode: str
    classes: tuple[str, ...]
    seed: int


def save_checkpoint(path: str | Path, params: HeadParams, meta: CheckpointMeta) -> None:
    """Versioned binary checkpoint: magic line, JSON manifest, little-endian float64 blobs."""
    arrays = params.to_dict()
    manifest = {
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in PARAM_FIELDS],
        "classes": list(meta.classes),
        "feature_dim": params.feature_dim,
        "mode": meta.mode,
        "n_classes": params.n_classes,
        "seed": meta.seed,
    }
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(canonical_json(manifest).encode("utf-8") + b"\n")
        for name in PARAM_FIELDS:
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[HeadParams, CheckpointMeta]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != _CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file (bad magic)")
        try:
            manifest = json.loads(fh.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: malformed checkpoint manifest") from exc
        arrays: dict[str, np.ndarray] = {}
        for spec in manifest["arrays"]:
            shape = tuple(int(v) for v in spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise DataError(f"{path}: truncated checkpoint (array {spec['name']!r})")
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after checkpoint payload")
    missing = [n for n in PARAM_FIELDS if n not in arrays]
    if missing:
        raise DataError(f"{path}: checkpoint missing arrays {missing}")
    meta = CheckpointMeta(
        mode=str(manifest["mode"]),
        classes=tuple(manifest["classes"]),
        seed=int(manifest["seed"]),
    )
    return HeadParams.from_dict(arrays), meta


# ---------------------------------------------------------------------------
# history and reports
# ---------------------------------------------------------------------------

_HISTORY_COLUMNS = (
    "step",
    "total",
    "detection",
    "presence_bce",
    "l1",
    "giou_penalty",
    "loc_asl",
    "mil_asl",
)


def write_history_csv(path: str | Path, history: list[tuple[int, LossBreakdown]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(_HISTORY_COLUMNS) + "\n")
        for step, row in history:
            fields = [str(step)] + [
                format(v, ".17g")
                for v in (
                    row.total,
                    row.detection,
                    row.presence_bce,
                    row.l1,
                    row.giou_penalty,
                    row.loc_asl,
                    row.mil_asl,
                )
            ]
            fh.write(",".join(fields) + "\n")


def _thr_key(t: float) -> str:
    return format(t, ".2f")


def report_to_json_obj(report: EvalReport) -> dict:
    classes = {}
    for cls, name in enumerate(report.class_names):
        classes[name] = {
            "ap": {_thr_key(t): v for t, v in report.ap[cls].items()},
            "map": report.class_map[cls],
            "loc_acc": {_thr_key(t): v for t, v in report.loc_acc[cls].items()},
        }
    return {
        "counts": {
            "images": report.counts.images,
            "gt_boxes": report.counts.gt_boxes,
            "predictions": report.counts.predictions,
        },
        "classes": classes,
        "overall": {
            "map": report.overall_map,
            "loc_acc": {_thr_key(t): v for t, v in report.loc_acc_macro.items()},
        },
    }


def write_report_json(path: str | Path, report: EvalReport) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(canonical_json(report_to_json_obj(report)) + "\n")


def write_report_csv(path: str | Path, report: EvalReport) -> None:
    """Flat class-by-metric table; empty cells mark undefined values."""
    ap_thresholds = sorted(next(iter(report.ap.values())).keys()) if report.ap else []
    la_thresholds = sorted(report.loc_acc_macro.keys())
    columns = (
        ["class"]
        + [f"ap@{_thr_key(t)}" for t in ap_thresholds]
        + ["map"]
        + [f"locacc@{_thr_key(t)}" for t in la_thresholds]
    )

    def fmt(v: float | None) -> str:
        return "" if v is None else format(v, ".17g")

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(columns) + "\n")
        for cls, name in enumerate(report.class_names):
            row = [name]
            row += [fmt(report.ap[cls][t]) for t in ap_thresholds]
            row.append(fmt(report.class_map[cls]))
            row += [fmt(report.loc_acc[cls].get(t)) for t in la_thresholds]
            fh.write(",".join(row) + "\n")
        row = ["overall"] + [""] * len(ap_thresholds) + [fmt(report.overall_map)]
        row += [fmt(report.loc_acc_macro.get(t)) for t in la_thresholds]
        fh.write(",".join(row) + "\n")
