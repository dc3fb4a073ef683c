import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import pandas as pd

from .errors import ConfigError, InputError

logger = logging.getLogger(__name__)

RELATIONS = ("left-of", "right-of", "above", "below")
SIZE_RELATIONS = ("bigger-than", "smaller-than")


@dataclass(frozen=True)
class Detection:
    label: str
    box: Tuple[float, float, float, float]
    score: float = 1.0

    def __post_init__(self):
        x_min, y_min, x_max, y_max = self.box
        if not (x_min < x_max and y_min < y_max):
            raise InputError(f"detection {self.label}: invalid box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise InputError(f"detection {self.label}: score {self.score} outside [0, 1]")

    @property
    def center(self) -> Tuple[float, float]:
        x_min, y_min, x_max, y_max = self.box
        return (x_min + x_max) / 2.0, (y_min + y_max) / 2.0

    @property
    def area(self) -> float:
        x_min, y_min, x_max, y_max = self.box
        return (x_max - x_min) * (y_max - y_min)

    @classmethod
    def from_dict(cls, data: Dict) -> "Detection":
        try:
            return cls(str(data["label"]), tuple(float(v) for v in data["box"]), float(data.get("score", 1.0)))
        except (KeyError, TypeError, ValueError) as e:
            raise InputError(f"malformed detection {data!r}: {e}") from e


@dataclass
class CheckResult:
    passed: bool
    reason: str = ""


def best_detection(label: str, detections: Sequence[Detection]) -> Optional[Detection]:
    """Highest-score detection carrying the label; ties keep the first"""
    best = None
    for detection in detections:
        if detection.label == label and (best is None or detection.score > best.score):
            best = detection
    return best


def check_spatial(subject: str, relation: str, obj: str, detections: Sequence[Detection]) -> CheckResult:
    """Compare box centers strictly along the relation's axis (image y grows downward)"""
    if relation not in RELATIONS:
        raise InputError(f"unknown spatial relation {relation!r}")
    a = best_detection(subject, detections)
    b = best_detection(obj, detections)
    missing = [label for label, det in ((subject, a), (obj, b)) if det is None]
    if missing:
        return CheckResult(False, f"missing entity: {', '.join(missing)}")
    (ax, ay), (bx, by) = a.center, b.center
    passed = {
        "left-of": ax < bx,
        "right-of": ax > bx,
        "above": ay < by,
        "below": ay > by,
    }[relation]
    return CheckResult(passed, "" if passed else f"{subject} not {relation} {obj}")


def check_size(ordering: Sequence[str], detections: Sequence[Detection]) -> CheckResult:
    """Pass iff box areas strictly decrease along ``ordering`` (largest first)"""
    if len(ordering) < 2:
        raise InputError("size ordering needs at least two labels")
    found = [best_detection(label, detections) for label in ordering]
    missing = [label for label, det in zip(ordering, found) if det is None]
    if missing:
        return CheckResult(False, f"missing entity: {', '.join(missing)}")
    for (bigger, a), (smaller, b) in zip(zip(ordering, found), zip(ordering[1:], found[1:])):
        if not a.area > b.area:
            return CheckResult(False, f"{bigger} is not bigger than {smaller}")
    return CheckResult(True)


def size_ordering(subject: str, relation: str, obj: str) -> List[str]:
    if relation not in SIZE_RELATIONS:
        raise InputError(f"unknown size relation {relation!r}")
    return [subject, obj] if relation == "bigger-than" else [obj, subject]


@dataclass
class ColorTable:
    """Named hue intervals in degrees; an interval with start > end wraps through 0"""

    intervals: Dict[str, List[Tuple[float, float]]] = field(default_factory=dict)

    def __post_init__(self):
        for color, spans in self.intervals.items():
            if not spans:
                raise ConfigError(f"color {color!r} has no hue interval")
            for start, end in spans:
                if not (0.0 <= start <= 360.0 and 0.0 <= end <= 360.0) or start == end:
                    raise ConfigError(f"color {color!r}: malformed interval [{start}, {end})")

    def contains(self, color: str, hue: float) -> bool:
        if color not in self.intervals:
            raise InputError(f"color {color!r} is not in the color table")
        hue = hue % 360.0
        for start, end in self.intervals[color]:
            if start < end and start <= hue < end:
                return True
            if start > end and (hue >= start or hue < end):
                return True
        return False

    def classify(self, hue: float) -> Optional[str]:
        for color in self.intervals:
            if self.contains(color, hue):
                return color
        return None

    @classmethod
    def load(cls, path) -> "ColorTable":
        try:
            with open(path, "r", encoding="utf-8") as handle:
                data = json.load(handle)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: color table is not valid JSON ({e})") from e
        return cls({str(k): [tuple(float(x) for x in span) for span in v] for k, v in data.items()})


def hue_degrees(pixels: np.ndarray) -> np.ndarray:
    """Per-pixel HSV hue in degrees for an RGB uint8 array"""
    rgb = np.ascontiguousarray(pixels, dtype=np.float32) / 255.0
    return cv2.cvtColor(rgb.reshape(-1, 1, 3), cv2.COLOR_RGB2HSV)[:, 0, 0].astype(np.float64)


def circular_mean(angles_deg: np.ndarray) -> float:
    """Mean direction of angles in degrees, in [0, 360)"""
    radians = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    mean = math.degrees(math.atan2(np.sin(radians).mean(), np.cos(radians).mean()))
    return mean % 360.0


def box_pixels(image: np.ndarray, box: Tuple[float, float, float, float]) -> np.ndarray:
    height, width = image.shape[:2]
    x0 = max(0, int(math.floor(box[0])))
    y0 = max(0, int(math.floor(box[1])))
    x1 = min(width, int(math.ceil(box[2])))
    y1 = min(height, int(math.ceil(box[3])))
    if x1 <= x0 or y1 <= y0:
        return np.empty((0, 3), dtype=image.dtype)
    return image[y0:y1, x0:x1].reshape(-1, 3)


def check_color(expected: Dict[str, str], detections: Sequence[Detection], image: np.ndarray,
                table: ColorTable) -> CheckResult:
    """Circular-mean hue inside each label's best box must fall in its color's intervals"""
    for label, color in expected.items():
        detection = best_detection(label, detections)
        if detection is None:
            return CheckResult(False, f"missing entity: {label}")
        pixels = box_pixels(image, detection.box)
        if pixels.size == 0:
            return CheckResult(False, f"{label}: box {detection.box} is empty after clipping to the image")
        hue = circular_mean(hue_degrees(pixels))
        if not table.contains(color, hue):
            return CheckResult(False, f"{label}: mean hue {hue:.1f} is not {color}")
    return CheckResult(True)


def score_category(passed: Sequence[bool], buckets: Optional[Sequence[str]] = None) -> Dict:
    """Accuracy percentage overall and, when bucket labels are given, per bucket"""
    if len(passed) == 0:
        raise InputError("cannot score an empty case set")
    frame = pd.DataFrame({"passed": [bool(p) for p in passed]})
    report = {"accuracy": 100.0 * frame["passed"].sum() / len(frame), "cases": len(frame)}
    if buckets is not None:
        if len(buckets) != len(passed):
            raise InputError("need one bucket label per case")
        frame["bucket"] = list(buckets)
        grouped = frame.groupby("bucket")["passed"].agg(["sum", "count"])
        report["per_bucket"] = {
            bucket: {"accuracy": 100.0 * row["sum"] / row["count"], "cases": int(row["count"])}
            for bucket, row in grouped.iterrows()
        }
    return report


@dataclass
class EvalCase:
    """One prompt's expected composition, as read from the cases file"""

    id: str
    category: str
    bucket: Optional[str] = None
    subject: Optional[str] = None
    relation: Optional[str] = None
    object: Optional[str] = None
    ordering: Optional[List[str]] = None
    colors: Optional[Dict[str, str]] = None
    image: Optional[str] = None

    @classmethod
    def from_dict(cls, data: Dict) -> "EvalCase":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise InputError(f"case {data.get('id')}: unknown keys {sorted(unknown)}")
        if "id" not in data or "category" not in data:
            raise InputError(f"case record needs id and category: {data!r}")
        return cls(**data)


def evaluate_case(case: EvalCase, detections: Sequence[Detection], table: Optional[ColorTable] = None,
                  image_root: Optional[Path] = None) -> CheckResult:
    if case.category == "spatial":
        return check_spatial(case.subject, case.relation, case.object, detections)
    if case.category == "size":
        ordering = case.ordering or size_ordering(case.subject, case.relation, case.object)
        return check_size(ordering, detections)
    if case.category == "color":
        if table is None:
            raise InputError("color cases need a color table")
        if not case.image or not case.colors:
            raise InputError(f"case {case.id}: color cases need image and colors")
        from .grid_io import read_ppm

        path = Path(case.image)
        if image_root is not None and not path.is_absolute():
            path = image_root / path
        return check_color(case.colors, detections, read_ppm(path), table)
    raise InputError(f"case {case.id}: unknown category {case.category!r}")


def _read_jsonl(path) -> List[Dict]:
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise InputError(f"{path}:{number}: not valid JSON ({e.msg})") from e
    return records


def load_cases(path) -> List[EvalCase]:
    cases = [EvalCase.from_dict(record) for record in _read_jsonl(path)]
    ids = [case.id for case in cases]
    if len(set(ids)) != len(ids):
        raise InputError(f"{path}: case ids must be unique")
    return cases


def load_detections(path) -> Dict[str, List[Detection]]:
    """Detections per case id, from lines of {"case_id": ..., "detections": [...]}"""
    detections: Dict[str, List[Detection]] = {}
    for record in _read_jsonl(path):
        if "case_id" not in record:
            raise InputError(f"{path}: detection record without case_id")
        found = [Detection.from_dict(d) for d in record.get("detections", [])]
        detections.setdefault(str(record["case_id"]), []).extend(found)
    return detections


def score_cases(cases: Sequence[EvalCase], detections: Dict[str, List[Detection]],
                table: Optional[ColorTable] = None, image_root: Optional[Path] = None) -> Dict:
    """Check every case and report accuracy per category, with per-bucket splits when labelled"""
    if not cases:
        raise InputError("cannot score an empty case set")
    rows = []
    for case in cases:
        outcome = evaluate_case(case, detections.get(case.id, []), table, image_root)
        if not outcome.passed:
            logger.debug("case %s failed: %s", case.id, outcome.reason)
        rows.append({"id": case.id, "category": case.category, "bucket": case.bucket,
                     "passed": outcome.passed, "reason": outcome.reason})
    frame = pd.DataFrame(rows)
    categories = {}
    for category, group in frame.groupby("category"):
        labelled = group["bucket"].notna().any()
        buckets = group["bucket"].fillna("unassigned").tolist() if labelled else None
        categories[category] = score_category(group["passed"].tolist(), buckets)
    return {
        "overall": score_category(frame["passed"].tolist()),
        "categories": categories,
        "cases": rows,
    }
