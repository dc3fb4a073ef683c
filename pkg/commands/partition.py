import logging
from pathlib import Path
from typing import Tuple

from utils.errors import InputError
from utils.grid_io import atomic_write, write_json
from utils.layout_data import DEFAULT_THRESHOLDS, layouts_to_jsonl, load_layouts, partition

logger = logging.getLogger(__name__)

SPLIT_FILES = ("split_low.jsonl", "split_mid.jsonl", "split_high.jsonl")


def parse_thresholds(text: str) -> Tuple[float, float]:
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError as e:
        raise InputError(f"thresholds must be two numbers, got {text!r}") from e
    if len(values) != 2:
        raise InputError(f"thresholds must be two numbers, got {text!r}")
    return values


def register(subparsers):
    parser = subparsers.add_parser("partition", help="split a layout file into max-IoU buckets")
    parser.add_argument("--in", dest="input", required=True, help="JSON-lines layout file")
    parser.add_argument("--out-dir", required=True, help="directory for the report and split files")
    parser.add_argument("--thresholds", default=",".join(f"{t:g}" for t in DEFAULT_THRESHOLDS),
                        help="bucket edges low,high (default 0,0.1)")
    parser.set_defaults(handler=run_partition)


def run_partition(args) -> int:
    if not Path(args.input).is_file():
        raise FileNotFoundError(f"layout file not found: {args.input}")
    thresholds = parse_thresholds(args.thresholds)
    layouts, rejections = load_layouts(args.input)
    for rejection in rejections:
        logger.warning("rejected layout %s: box %d %s violates %s",
                       rejection.layout_id, rejection.box_index, list(rejection.box), rejection.rule)
    report = partition(layouts, thresholds, rejections)

    out_dir = Path(args.out_dir)
    buckets = list(report.counts)
    document = report.to_dict()
    document["split_files"] = dict(zip(buckets, SPLIT_FILES))
    for bucket, name in zip(buckets, SPLIT_FILES):
        members = [layout for layout in layouts if report.assignments[layout.id] == bucket]
        atomic_write(out_dir / name, layouts_to_jsonl(members))
    write_json(out_dir / "report.json", document)

    print(report.to_frame().groupby("bucket").size().reindex(buckets, fill_value=0).to_string())
    logger.info("partition report written to %s", out_dir / "report.json")
    return 0
