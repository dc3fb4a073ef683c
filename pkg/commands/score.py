import logging
from pathlib import Path

from utils.config import color_table_path
from utils.eval_metrics import ColorTable, load_cases, load_detections, score_cases
from utils.grid_io import write_json

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser("score", help="score layout correctness from detector boxes")
    parser.add_argument("--cases", required=True, help="JSON-lines file of evaluation cases")
    parser.add_argument("--dets", required=True, help="JSON-lines file of detections per case")
    parser.add_argument("--colors", help="color table JSON (default: TOLO_COLOR_TABLE or the bundled table)")
    parser.add_argument("--images-dir", help="root for relative image paths (default: the cases file's folder)")
    parser.add_argument("--out", help="write the accuracy report as JSON")
    parser.set_defaults(handler=run_score)


def run_score(args) -> int:
    for path in (args.cases, args.dets):
        if not Path(path).is_file():
            raise FileNotFoundError(f"file not found: {path}")
    cases = load_cases(args.cases)
    detections = load_detections(args.dets)
    table = None
    if any(case.category == "color" for case in cases):
        table = ColorTable.load(args.colors or color_table_path())
    image_root = Path(args.images_dir) if args.images_dir else Path(args.cases).parent

    report = score_cases(cases, detections, table, image_root)
    if args.out:
        write_json(args.out, report)
    for category, result in sorted(report["categories"].items()):
        print(f"{category}: {result['accuracy']:.2f}% of {result['cases']}")
        for bucket, split in sorted(result.get("per_bucket", {}).items()):
            print(f"  {bucket}: {split['accuracy']:.2f}% of {split['cases']}")
    print(f"overall: {report['overall']['accuracy']:.2f}% of {report['overall']['cases']}")
    return 0
