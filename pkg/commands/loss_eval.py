import json
import logging

from utils.config import load_config
from utils.errors import InputError
from utils.grid_io import read_concept_maps, write_json
from utils.guidance_losses import build_concept_maps, loss_report, rasterize_box
from utils.layout_data import Rejection, read_layout_records, validate

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser("loss-eval", help="evaluate the guidance losses on stored concept maps")
    parser.add_argument("--maps-dir", required=True, help="directory of concept_<i>.tolog maps")
    parser.add_argument("--layout", required=True, help="JSON file holding the layout the maps belong to")
    parser.add_argument("--config", help="JSON config supplying loss weights and canvas size")
    parser.add_argument("--out", help="write the report here instead of stdout")
    parser.set_defaults(handler=run_loss_eval)


def evaluate_maps(maps_dir, layout, config) -> dict:
    raw_maps = read_concept_maps(maps_dir)
    if len(raw_maps) != layout.k:
        raise InputError(f"{maps_dir} holds {len(raw_maps)} maps, layout {layout.id} has {layout.k} boxes")
    shapes = {grid.shape for grid in raw_maps}
    if len(shapes) != 1 or raw_maps[0].height != raw_maps[0].width:
        raise InputError(f"{maps_dir}: concept maps must share one square shape, found {sorted(shapes)}")
    size = raw_maps[0].height
    canvas = config.engine.canvas_size
    concepts = [
        build_concept_maps(raw, rasterize_box(box, size, canvas), config.weights)
        for raw, box in zip(raw_maps, layout.boxes)
    ]
    return loss_report(concepts, config.weights)


def run_loss_eval(args) -> int:
    config = load_config(args.config)
    records = read_layout_records(args.layout)
    if len(records) != 1:
        raise InputError(f"{args.layout} must hold exactly one layout")
    layout = validate(records[0])
    if isinstance(layout, Rejection):
        raise InputError(f"layout {layout.layout_id} rejected: {layout.rule}")
    report = evaluate_maps(args.maps_dir, layout, config)
    if args.out:
        write_json(args.out, report)
        logger.info("loss report written to %s", args.out)
    else:
        print(json.dumps(report, indent=2, sort_keys=True))
    return 0
