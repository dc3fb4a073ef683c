import json
import logging
import re
from pathlib import Path

from utils.config import ToloConfig
from utils.figures import write_figures
from utils.grid_io import read_concept_maps
from utils.guidance_losses import build_concept_maps, rasterize_box
from utils.layout_data import parse_layout
from utils.manifest import MANIFEST_NAME, RunManifest
from utils.scheduler import TraceRecord

logger = logging.getLogger(__name__)

_STEP_DIR = re.compile(r"^step_(\d+)$")


def register(subparsers):
    parser = subparsers.add_parser("figures", help="export plotly figures of a guide run")
    parser.add_argument("--run-dir", required=True, help="output directory of a guide run")
    parser.add_argument("--out", help="figure directory (default: RUN_DIR/figures)")
    parser.set_defaults(handler=run_figures)


def load_trace(path: Path):
    with open(path, "r", encoding="utf-8") as handle:
        return [TraceRecord.from_dict(json.loads(line)) for line in handle if line.strip()]


def run_figures(args) -> int:
    run_dir = Path(args.run_dir)
    manifest = RunManifest.load(run_dir / MANIFEST_NAME)
    config = ToloConfig.from_dict(manifest.config)
    layout = parse_layout(manifest.layout)
    trace = load_trace(run_dir / "trace.jsonl")

    step_concepts = {}
    maps_root = run_dir / "maps"
    if maps_root.is_dir():
        for step_dir in maps_root.iterdir():
            match = _STEP_DIR.match(step_dir.name)
            if not match:
                continue
            raw_maps = read_concept_maps(step_dir)
            size = raw_maps[0].height
            step_concepts[int(match.group(1))] = [
                build_concept_maps(raw, rasterize_box(box, size, config.engine.canvas_size), config.weights)
                for raw, box in zip(raw_maps, layout.boxes)
            ]
    else:
        logger.info("%s has no per-step maps; rerun guide with --dump-maps for heatmaps", run_dir)

    written = write_figures(Path(args.out) if args.out else run_dir / "figures", trace, step_concepts)
    for path in written:
        print(path)
    return 0
