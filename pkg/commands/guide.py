"""guide: run two-stage guided denoising on one layout or a batch of layouts."""
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Tuple

from sqlalchemy.exc import SQLAlchemyError

from utils.attention import AttentionEngine
from utils.config import MODES, ToloConfig, load_config
from utils.errors import InputError
from utils.grid_io import write_grid, write_jsonl, write_pgm
from utils.layout_data import Layout, Rejection, parse_layout, read_layout_records, validate
from utils.manifest import RunManifest
from utils.run_store import RunStore
from utils.scheduler import GuidanceResult, GuidedDenoising, TraceRecord

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser("guide", help="run guided denoising on a layout")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--layout", help="JSON file holding one layout")
    source.add_argument("--layouts", help="JSON-lines file of layouts, run as a batch")
    parser.add_argument("--out-dir", required=True, help="output directory")
    parser.add_argument("--config", help="JSON config with engine/weights/guidance sections")
    parser.add_argument("--m", type=int, help="aggregation-stage guided steps")
    parser.add_argument("--n", type=int, help="total guided steps")
    parser.add_argument("--alpha", type=float, help="loss scale of the latent update")
    parser.add_argument("--mode", choices=MODES, help="schedule mode")
    parser.add_argument("--iou-threshold", type=float, help="IoU above which auto mode runs two stages")
    parser.add_argument("--T", dest="T", type=int, help="denoising timesteps")
    parser.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
    parser.add_argument("--dump-maps", action="store_true", help="write raw concept maps of every step")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes for --layouts")
    parser.add_argument("--no-store", action="store_true", help="skip the run registry")
    parser.set_defaults(handler=run_guide)


def resolve_config(args) -> ToloConfig:
    return load_config(args.config).with_overrides(
        T=args.T, m=args.m, n=args.n, alpha=args.alpha, mode=args.mode, iou_threshold=args.iou_threshold
    )


def write_run(out_dir: Path, layout: Layout, config: ToloConfig, seed: int,
              dump_maps: bool = False) -> Tuple[GuidanceResult, RunManifest]:
    """Execute one run and write its artifacts and manifest under out_dir"""
    out_dir = Path(out_dir)
    engine = AttentionEngine(config.engine, seed)
    written: List[Path] = []

    def dump(t, raw_maps):
        for i, grid in enumerate(raw_maps):
            written.append(write_grid(out_dir / "maps" / f"step_{t}" / f"concept_{i}.tolog", grid))

    guided = GuidedDenoising(engine, config.guidance, config.weights)
    result = guided.run(layout, dump if dump_maps else None)

    written.append(write_jsonl(out_dir / "trace.jsonl", (r.to_dict() for r in result.trace)))
    for c, channel in enumerate(result.latent.channels):
        written.append(write_grid(out_dir / "latent" / f"channel_{c}.tolog", channel))
    final_maps = engine.concept_maps(result.latent, engine.encode_prompt(layout.prompt), layout)
    for i, grid in enumerate(final_maps):
        written.append(write_grid(out_dir / "final_maps" / f"concept_{i}.tolog", grid))
        written.append(write_pgm(out_dir / "final_maps" / f"concept_{i}.pgm", grid))

    manifest = RunManifest(
        layout_id=layout.id,
        seed=seed,
        config=config.to_dict(),
        layout=layout.to_record(),
        mode=result.mode,
        dump_maps=dump_maps,
    )
    manifest.record_outputs(out_dir, written)
    manifest.write(out_dir)
    logger.info("run %s finished: %s", layout.id, result.stage_counts())
    return result, manifest


def _batch_worker(job: Tuple[Dict[str, Any], Dict[str, Any], int, str, bool]):
    record, config_dict, seed, out_dir, dump_maps = job
    result, manifest = write_run(Path(out_dir), parse_layout(record), ToloConfig.from_dict(config_dict),
                                 seed, dump_maps)
    return out_dir, manifest.to_dict(), [r.to_dict() for r in result.trace]


def _accepted(records: List[Dict[str, Any]]) -> List[Layout]:
    layouts = []
    for record in records:
        result = validate(record)
        if isinstance(result, Rejection):
            raise InputError(f"layout {result.layout_id} rejected: box {result.box_index} violates {result.rule}")
        layouts.append(result)
    return layouts


def _store_runs(runs: List[Tuple[str, RunManifest, List[TraceRecord]]]) -> None:
    try:
        store = RunStore()
    except SQLAlchemyError as e:
        logger.warning("run registry unavailable, runs not recorded: %s", e)
        return
    try:
        for run_dir, manifest, trace in runs:
            run_id = store.add_run(manifest, run_dir)
            store.add_trace(run_id, trace)
            logger.debug("recorded run %d for layout %s", run_id, manifest.layout_id)
    except SQLAlchemyError as e:
        logger.warning("could not record runs: %s", e)
    finally:
        store.close()


def run_guide(args) -> int:
    config = resolve_config(args)
    source = args.layout or args.layouts
    if not Path(source).is_file():
        raise FileNotFoundError(f"layout file not found: {source}")
    layouts = _accepted(read_layout_records(source))
    if args.layout and len(layouts) != 1:
        raise InputError(f"--layout expects exactly one layout, {source} holds {len(layouts)}")
    if args.jobs < 1:
        raise InputError("--jobs must be at least 1")

    out_dir = Path(args.out_dir)
    runs = []
    if args.layout:
        result, manifest = write_run(out_dir, layouts[0], config, args.seed, args.dump_maps)
        runs.append((str(out_dir), manifest, result.trace))
        _print_summary(layouts[0].id, result.mode, result.trace)
    else:
        ids = [layout.id for layout in layouts]
        if len(set(ids)) != len(ids):
            raise InputError("layout ids must be unique in a batch")
        jobs = [(layout.to_record(), config.to_dict(), args.seed, str(out_dir / layout.id), args.dump_maps)
                for layout in layouts]
        if args.jobs == 1:
            outcomes = [_batch_worker(job) for job in jobs]
        else:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                outcomes = list(pool.map(_batch_worker, jobs))
        for run_dir, manifest_dict, trace_dicts in outcomes:
            manifest = RunManifest.from_dict(manifest_dict)
            trace = [TraceRecord.from_dict(d) for d in trace_dicts]
            runs.append((run_dir, manifest, trace))
            _print_summary(manifest.layout_id, manifest.mode, trace)

    if not args.no_store:
        _store_runs(runs)
    return 0


def _print_summary(layout_id: str, mode: str, trace: List[TraceRecord]):
    counts = {}
    for record in trace:
        counts[record.stage] = counts.get(record.stage, 0) + 1
    final = trace[-1].mean_overlap if trace else 0.0
    staged = ", ".join(f"{stage}={count}" for stage, count in sorted(counts.items()))
    print(f"{layout_id}: mode={mode} {staged} final mean overlap={final:.4f}")
