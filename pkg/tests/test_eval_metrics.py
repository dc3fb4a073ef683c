import json

import numpy as np
import pytest

from utils.config import BUNDLED_COLOR_TABLE
from utils.errors import ConfigError, InputError
from utils.eval_metrics import (
    ColorTable,
    Detection,
    EvalCase,
    best_detection,
    check_color,
    check_size,
    check_spatial,
    circular_mean,
    evaluate_case,
    hue_degrees,
    load_cases,
    load_detections,
    score_cases,
    score_category,
)
from utils.grid_io import write_ppm

RED_TABLE = ColorTable({"red": [(0.0, 30.0), (330.0, 360.0)], "green": [(90.0, 150.0)]})


def centered(label, cx, cy, half=5.0, score=0.9):
    return Detection(label, (cx - half, cy - half, cx + half, cy + half), score)


def test_detection_rejects_invalid_boxes():
    with pytest.raises(InputError):
        Detection("a", (10, 0, 10, 5))
    with pytest.raises(InputError):
        Detection("a", (0, 0, 1, 1), score=1.5)


def test_best_detection_prefers_highest_score():
    low, high = centered("dog", 10, 10, score=0.2), centered("dog", 90, 90, score=0.8)
    assert best_detection("dog", [low, high]) is high
    assert best_detection("cat", [low, high]) is None


def test_check_spatial_examples():
    dets = [centered("A", 10, 50), centered("B", 100, 50)]
    assert check_spatial("A", "left-of", "B", dets).passed
    assert not check_spatial("A", "right-of", "B", dets).passed
    missing = check_spatial("A", "left-of", "C", dets)
    assert not missing.passed and "missing" in missing.reason
    assert not check_spatial("A", "above", "B", dets).passed
    assert not check_spatial("A", "below", "B", dets).passed
    with pytest.raises(InputError):
        check_spatial("A", "behind", "B", dets)


def test_image_y_grows_downward():
    dets = [centered("sun", 50, 10), centered("sea", 50, 90)]
    assert check_spatial("sun", "above", "sea", dets).passed
    assert check_spatial("sea", "below", "sun", dets).passed


@pytest.mark.parametrize("seed", range(25))
def test_spatial_relations_are_dual(seed):
    rng = np.random.default_rng(seed)
    dets = [centered(label, *rng.integers(0, 4, size=2) * 10.0, score=float(rng.random()))
            for label in ("A", "B", "A")]
    for relation, dual in (("left-of", "right-of"), ("above", "below")):
        assert check_spatial("A", relation, "B", dets).passed == check_spatial("B", dual, "A", dets).passed


def test_check_size_examples():
    big = Detection("A", (0, 0, 100, 100))
    small = Detection("B", (0, 0, 50, 50))
    assert check_size(["A", "B"], [big, small]).passed
    assert not check_size(["A", "B"], [big, Detection("B", (200, 200, 300, 300))]).passed
    mid = Detection("C", (0, 0, 70, 70))
    assert check_size(["A", "C", "B"], [big, small, mid]).passed
    assert not check_size(["A", "B", "C"], [big, small, mid]).passed
    assert not check_size(["A", "D"], [big]).passed


def test_check_size_is_scale_invariant():
    rng = np.random.default_rng(1)
    for _ in range(50):
        boxes = [tuple(sorted(rng.integers(0, 200, size=2)) + sorted(rng.integers(0, 200, size=2))) for _ in range(3)]
        boxes = [(b[0], b[2], b[1] + 1, b[3] + 1) for b in boxes]
        dets = [Detection(label, box) for label, box in zip("ABC", boxes)]
        scaled = [Detection(d.label, tuple(3.5 * v for v in d.box)) for d in dets]
        assert check_size(["A", "B", "C"], dets).passed == check_size(["A", "B", "C"], scaled).passed


def test_hue_of_primaries():
    pixels = np.array([[255, 0, 0], [0, 255, 0], [0, 0, 255]], dtype=np.uint8)
    np.testing.assert_allclose(hue_degrees(pixels), [0.0, 120.0, 240.0], atol=1e-3)


def _solid(rgb, size=20):
    return np.tile(np.array(rgb, dtype=np.uint8), (size, size, 1))


def test_check_color_solid_boxes():
    box = [Detection("apple", (2, 2, 18, 18))]
    assert check_color({"apple": "red"}, box, _solid([255, 0, 0]), RED_TABLE).passed
    assert not check_color({"apple": "red"}, box, _solid([0, 255, 0]), RED_TABLE).passed


def test_check_color_uses_circular_mean_at_the_wraparound():
    image = _solid([255, 43, 0])  # hue about 10
    image[:, 10:] = [255, 0, 43]  # hue about 350
    hues = hue_degrees(image.reshape(-1, 3))
    assert not RED_TABLE.contains("red", hues.mean())
    assert check_color({"apple": "red"}, [Detection("apple", (0, 0, 20, 20))], image, RED_TABLE).passed


def test_check_color_fails_on_empty_clipped_box():
    result = check_color({"apple": "red"}, [Detection("apple", (50, 50, 60, 60))], _solid([255, 0, 0]), RED_TABLE)
    assert not result.passed and "empty" in result.reason


@pytest.mark.parametrize("delta", [0.0, 17.0, 200.0, 355.0])
def test_circular_mean_is_rotation_equivariant(delta):
    rng = np.random.default_rng(int(delta))
    angles = rng.uniform(-60.0, 60.0, size=40) % 360.0
    shifted = circular_mean((angles + delta) % 360.0)
    expected = (circular_mean(angles) + delta) % 360.0
    assert min(abs(shifted - expected), 360.0 - abs(shifted - expected)) < 1e-9


def test_bundled_color_table():
    table = ColorTable.load(BUNDLED_COLOR_TABLE)
    assert set(table.intervals) == {"red", "orange", "yellow", "green", "blue", "purple"}
    assert table.contains("red", 0.0) and table.contains("red", 350.0)
    assert table.classify(120.0) == "green"
    assert table.classify(60.0) == "yellow"
    with pytest.raises(InputError):
        table.contains("teal", 180.0)


@pytest.mark.parametrize("hue, expected", [(0.0, "red"), (30.0, "orange"), (60.0, "yellow"), (120.0, "green"),
                                           (210.0, "blue"), (292.0, "purple")])
def test_bundled_color_table_tiles_the_hue_circle(hue, expected):
    table = ColorTable.load(BUNDLED_COLOR_TABLE)
    for h in np.arange(0.0, 360.0, 0.25):
        assert sum(table.contains(color, h) for color in table.intervals) == 1
    assert table.classify(hue) == expected


def test_color_table_rejects_malformed_intervals():
    with pytest.raises(ConfigError):
        ColorTable({"red": []})
    with pytest.raises(ConfigError):
        ColorTable({"red": [(10.0, 10.0)]})
    with pytest.raises(ConfigError):
        ColorTable({"red": [(0.0, 400.0)]})


def test_score_category():
    assert score_category([True] * 4)["accuracy"] == 100.0
    assert score_category([False] * 5)["accuracy"] == 0.0
    passed = [True, False, True, True, False, True, False, True]
    assert score_category(passed)["accuracy"] == 62.5
    buckets = ["IoU=0"] * 4 + ["IoU>0.1"] * 4
    report = score_category(passed, buckets)
    assert report["per_bucket"]["IoU=0"]["accuracy"] == 75.0
    assert report["per_bucket"]["IoU>0.1"]["accuracy"] == 50.0
    with pytest.raises(InputError):
        score_category([])


def test_score_category_is_permutation_invariant():
    rng = np.random.default_rng(2)
    passed = list(rng.random(30) < 0.4)
    buckets = list(rng.choice(["a", "b", "c"], size=30))
    order = rng.permutation(30)
    shuffled = score_category([passed[i] for i in order], [buckets[i] for i in order])
    assert shuffled == score_category(passed, buckets)


def test_scoring_cases_from_files(tmp_path):
    write_ppm(tmp_path / "red.ppm", _solid([255, 0, 0], size=32))
    cases = [
        {"id": "s1", "category": "spatial", "bucket": "IoU=0", "subject": "A", "relation": "left-of", "object": "B"},
        {"id": "s2", "category": "spatial", "bucket": "IoU>0.1", "subject": "A", "relation": "above", "object": "B"},
        {"id": "z1", "category": "size", "subject": "A", "relation": "smaller-than", "object": "B"},
        {"id": "c1", "category": "color", "image": "red.ppm", "colors": {"apple": "red"}},
    ]
    dets = [
        {"case_id": "s1", "detections": [{"label": "A", "box": [0, 0, 10, 10]}, {"label": "B", "box": [50, 0, 60, 10]}]},
        {"case_id": "s2", "detections": [{"label": "A", "box": [0, 50, 10, 60]}, {"label": "B", "box": [0, 0, 10, 10]}]},
        {"case_id": "z1", "detections": [{"label": "A", "box": [0, 0, 5, 5]}, {"label": "B", "box": [0, 0, 50, 50]}]},
        {"case_id": "c1", "detections": [{"label": "apple", "box": [4, 4, 28, 28], "score": 0.7}]},
    ]
    cases_path, dets_path = tmp_path / "cases.jsonl", tmp_path / "dets.jsonl"
    cases_path.write_text("".join(json.dumps(c) + "\n" for c in cases))
    dets_path.write_text("".join(json.dumps(d) + "\n" for d in dets))

    report = score_cases(load_cases(cases_path), load_detections(dets_path), RED_TABLE, tmp_path)
    assert report["overall"]["accuracy"] == 75.0
    assert report["categories"]["spatial"]["per_bucket"]["IoU>0.1"]["accuracy"] == 0.0
    assert report["categories"]["size"]["accuracy"] == 100.0
    assert "per_bucket" not in report["categories"]["size"]
    assert report["categories"]["color"]["accuracy"] == 100.0


def test_case_records_are_checked():
    with pytest.raises(InputError):
        EvalCase.from_dict({"id": "x", "category": "spatial", "colour": "red"})
    with pytest.raises(InputError):
        evaluate_case(EvalCase("x", "texture"), [])
