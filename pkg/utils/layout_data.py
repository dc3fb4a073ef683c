import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import pandas as pd

from .errors import InputError, LayoutParseError

logger = logging.getLogger(__name__)

CANVAS_SIZE = 512
CATEGORIES = ("spatial", "color", "size")
DEFAULT_THRESHOLDS = (0.0, 0.1)

Box = Tuple[float, float, float, float]


@dataclass(frozen=True)
class Layout:
    """A prompt, k boxes in canvas pixels and the token indices of each box's concept"""

    id: str
    prompt: Tuple[str, ...]
    boxes: Tuple[Box, ...]
    concepts: Tuple[Tuple[int, ...], ...] = ()
    category: Optional[str] = None

    @property
    def k(self) -> int:
        return len(self.boxes)

    def require_concepts(self) -> None:
        if len(self.concepts) != self.k:
            raise InputError(f"layout {self.id}: guidance needs one concept per box")

    def to_record(self) -> Dict[str, Any]:
        record = {
            "id": self.id,
            "prompt": list(self.prompt),
            "boxes": [list(box) for box in self.boxes],
        }
        if self.concepts:
            record["concepts"] = [list(c) for c in self.concepts]
        if self.category is not None:
            record["category"] = self.category
        return record


@dataclass(frozen=True)
class Rejection:
    layout_id: str
    rule: str
    box_index: int
    box: Box


def _number(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise LayoutParseError(f"{where}: expected a number, got {value!r}")
    number = float(value)
    if not math.isfinite(number):
        raise LayoutParseError(f"{where}: coordinate is not finite")
    return number


def parse_layout(raw: Dict[str, Any]) -> Layout:
    """Turn a raw JSON record into a Layout without applying the dirty-data rules"""
    if not isinstance(raw, dict):
        raise LayoutParseError(f"layout record must be an object, got {type(raw).__name__}")
    layout_id = str(raw.get("id", ""))
    if not layout_id:
        raise LayoutParseError("layout record has no id")
    if layout_id.startswith(".") or any(sep in layout_id for sep in ("/", "\\")):
        # batch runs use the id as a directory name under --out-dir
        raise LayoutParseError(f"layout id {layout_id!r} must be a plain file name")

    prompt = raw.get("prompt")
    if isinstance(prompt, str):
        prompt = prompt.split()
    if not isinstance(prompt, list) or not all(isinstance(t, str) for t in prompt):
        raise LayoutParseError(f"layout {layout_id}: prompt must be a token list")

    raw_boxes = raw.get("boxes")
    if not isinstance(raw_boxes, list) or not raw_boxes:
        raise LayoutParseError(f"layout {layout_id}: boxes must be a non-empty list")
    boxes = []
    for i, box in enumerate(raw_boxes):
        if not isinstance(box, (list, tuple)) or len(box) != 4:
            raise LayoutParseError(f"layout {layout_id}: box {i} must have 4 coordinates")
        boxes.append(tuple(_number(v, f"layout {layout_id} box {i}") for v in box))

    concepts: List[Tuple[int, ...]] = []
    raw_concepts = raw.get("concepts")
    if raw_concepts is not None:
        if not isinstance(raw_concepts, list) or len(raw_concepts) != len(boxes):
            raise LayoutParseError(f"layout {layout_id}: need exactly one concept per box")
        for i, concept in enumerate(raw_concepts):
            if not isinstance(concept, list) or not concept:
                raise LayoutParseError(f"layout {layout_id}: concept {i} must be a non-empty list")
            for index in concept:
                if isinstance(index, bool) or not isinstance(index, int):
                    raise LayoutParseError(f"layout {layout_id}: concept {i} has a non-integer index")
                if not 0 <= index < len(prompt):
                    raise LayoutParseError(
                        f"layout {layout_id}: token index {index} outside prompt of {len(prompt)}"
                    )
            concepts.append(tuple(concept))

    category = raw.get("category")
    if category is not None and category not in CATEGORIES:
        raise LayoutParseError(f"layout {layout_id}: unknown category {category!r}")

    return Layout(layout_id, tuple(prompt), tuple(boxes), tuple(concepts), category)


def box_rule_violation(box: Box, canvas_size: int = CANVAS_SIZE) -> Optional[str]:
    x_min, y_min, x_max, y_max = box
    if max(box) > canvas_size:
        return f"coordinate > {canvas_size}"
    if x_min >= x_max:
        return "x_min >= x_max"
    if y_min >= y_max:
        return "y_min >= y_max"
    return None


def validate(raw: Union[Dict[str, Any], Layout], canvas_size: int = CANVAS_SIZE) -> Union[Layout, Rejection]:
    """Accept a layout unchanged or reject it on the first dirty box"""
    layout = raw if isinstance(raw, Layout) else parse_layout(raw)
    for i, box in enumerate(layout.boxes):
        rule = box_rule_violation(box, canvas_size)
        if rule is not None:
            return Rejection(layout.id, rule, i, box)
    return layout


def pairwise_iou(a: Box, b: Box) -> float:
    """Intersection over union of two axis-aligned boxes on continuous coordinates"""
    inter_w = min(a[2], b[2]) - max(a[0], b[0])
    inter_h = min(a[3], b[3]) - max(a[1], b[1])
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    intersection = inter_w * inter_h
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - intersection
    return intersection / union


def layout_iou(layout: Layout) -> float:
    """Maximum IoU over distinct box pairs; 0 for a single box"""
    best = 0.0
    for i in range(layout.k):
        for j in range(i + 1, layout.k):
            best = max(best, pairwise_iou(layout.boxes[i], layout.boxes[j]))
    return best


def bucket_names(thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> Tuple[str, str, str]:
    low, high = thresholds
    if low == 0:
        first = "IoU=0"
    else:
        first = f"IoU<={low:g}"
    return first, f"{low:g}<IoU<={high:g}", f"IoU>{high:g}"


def bucket_for(iou: float, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> str:
    low, high = thresholds
    names = bucket_names(thresholds)
    if iou <= low:
        return names[0]
    if iou <= high:
        return names[1]
    return names[2]


@dataclass
class PartitionReport:
    thresholds: Tuple[float, float]
    assignments: Dict[str, str] = field(default_factory=dict)
    ious: Dict[str, float] = field(default_factory=dict)
    categories: Dict[str, Optional[str]] = field(default_factory=dict)
    rejections: List[Rejection] = field(default_factory=list)

    @property
    def counts(self) -> Dict[str, int]:
        counts = {name: 0 for name in bucket_names(self.thresholds)}
        for bucket in self.assignments.values():
            counts[bucket] += 1
        return counts

    def to_frame(self) -> pd.DataFrame:
        """One row per accepted layout"""
        return pd.DataFrame(
            {
                "id": list(self.assignments),
                "iou": [self.ious[i] for i in self.assignments],
                "bucket": list(self.assignments.values()),
                "category": [self.categories.get(i) or "uncategorized" for i in self.assignments],
            },
            columns=["id", "iou", "bucket", "category"],
        )

    def counts_by_category(self) -> Dict[str, Dict[str, int]]:
        frame = self.to_frame()
        names = list(bucket_names(self.thresholds))
        if frame.empty:
            return {}
        table = (
            frame.groupby(["category", "bucket"]).size().unstack(fill_value=0).reindex(columns=names, fill_value=0)
        )
        return {category: {k: int(v) for k, v in row.items()} for category, row in table.iterrows()}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "thresholds": list(self.thresholds),
            "counts": self.counts,
            "counts_by_category": self.counts_by_category(),
            "assignments": dict(self.assignments),
            "rejections": [
                {"id": r.layout_id, "rule": r.rule, "box_index": r.box_index, "box": list(r.box)}
                for r in self.rejections
            ],
            "total": len(self.assignments) + len(self.rejections),
        }


def partition(layouts: Iterable[Layout], thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
              rejections: Iterable[Rejection] = ()) -> PartitionReport:
    """Assign every accepted layout to exactly one IoU bucket"""
    low, high = float(thresholds[0]), float(thresholds[1])
    if not 0.0 <= low < high <= 1.0:
        raise InputError(f"thresholds must satisfy 0 <= low < high <= 1, got {low}, {high}")
    report = PartitionReport((low, high), rejections=list(rejections))
    for layout in layouts:
        if layout.id in report.assignments:
            raise InputError(f"duplicate layout id {layout.id}")
        iou = layout_iou(layout)
        report.ious[layout.id] = iou
        report.categories[layout.id] = layout.category
        report.assignments[layout.id] = bucket_for(iou, report.thresholds)
    logger.info("partitioned %d layouts, %d rejected", len(report.assignments), len(report.rejections))
    return report


def read_layout_records(path: str) -> List[Dict[str, Any]]:
    """Read a JSON-lines layout file; a single JSON object or array is accepted too"""
    with open(path, "r", encoding="utf-8") as handle:
        text = handle.read()
    stripped = text.strip()
    if stripped.startswith("["):
        try:
            return json.loads(stripped)
        except json.JSONDecodeError as e:
            raise LayoutParseError(f"{path}: {e}") from e
    if stripped.startswith("{"):
        try:
            document = json.loads(stripped)
        except json.JSONDecodeError:
            document = None
        if isinstance(document, dict):
            return [document]
    records = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise LayoutParseError(f"{path}:{number}: not valid JSON ({e.msg})") from e
    return records


def load_layouts(path: str) -> Tuple[List[Layout], List[Rejection]]:
    accepted, rejected = [], []
    for raw in read_layout_records(path):
        result = validate(raw)
        if isinstance(result, Rejection):
            rejected.append(result)
        else:
            accepted.append(result)
    return accepted, rejected


def layouts_to_jsonl(layouts: Iterable[Layout]) -> str:
    return "".join(json.dumps(layout.to_record()) + "\n" for layout in layouts)
