"""ablate: two-stage against the matched one-stage schedule over a range of loss scales."""
import logging
from pathlib import Path
from typing import Tuple

from commands.guide import resolve_config
from utils.ablation import DEFAULT_ALPHAS, summarize, sweep
from utils.errors import InputError
from utils.grid_io import atomic_write
from utils.layout_data import layout_iou, load_layouts

logger = logging.getLogger(__name__)


def parse_alphas(text: str) -> Tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as e:
        raise InputError(f"alphas must be comma-separated numbers, got {text!r}") from e
    if not values or any(v < 0 for v in values):
        raise InputError(f"alphas must be non-negative numbers, got {text!r}")
    return values


def register(subparsers):
    parser = subparsers.add_parser("ablate", help="compare two-stage and one-stage guidance across loss scales")
    parser.add_argument("--layouts", required=True, help="JSON-lines layout file")
    parser.add_argument("--alphas", default=",".join(f"{a:g}" for a in DEFAULT_ALPHAS),
                        help="loss scales to sweep (default 50,60,70,80,90)")
    parser.add_argument("--seeds", type=int, default=1, help="run seeds 0..SEEDS-1 per layout (default 1)")
    parser.add_argument("--min-iou", type=float,
                        help="only layouts whose max pairwise IoU exceeds this value")
    parser.add_argument("--config", help="JSON config with engine/weights/guidance sections")
    parser.add_argument("--m", type=int, help="aggregation-stage guided steps of the two-stage run")
    parser.add_argument("--n", type=int, help="guided steps of both runs")
    parser.add_argument("--T", dest="T", type=int, help="denoising timesteps")
    parser.add_argument("--out", help="write the per-run table as CSV")
    parser.set_defaults(handler=run_ablate, alpha=None, mode=None, iou_threshold=None)


def run_ablate(args) -> int:
    if not Path(args.layouts).is_file():
        raise FileNotFoundError(f"layout file not found: {args.layouts}")
    if args.seeds < 1:
        raise InputError("--seeds must be at least 1")
    alphas = parse_alphas(args.alphas)
    config = resolve_config(args)

    layouts, rejections = load_layouts(args.layouts)
    for rejection in rejections:
        logger.warning("skipping layout %s: box %d violates %s",
                       rejection.layout_id, rejection.box_index, rejection.rule)
    if args.min_iou is not None:
        layouts = [layout for layout in layouts if layout_iou(layout) > args.min_iou]
    if not layouts:
        raise InputError(f"no layouts left to ablate in {args.layouts}")
    logger.info("ablating %d layouts x %d seeds x %d loss scales", len(layouts), args.seeds, len(alphas))

    runs = sweep(layouts, config, alphas, range(args.seeds))
    if args.out:
        atomic_write(args.out, runs.to_csv(index=False))
        logger.info("per-run table written to %s", args.out)
    print(summarize(runs).to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return 0
