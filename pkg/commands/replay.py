import logging
import tempfile
from pathlib import Path

from commands.guide import write_run
from utils.config import ToloConfig
from utils.errors import ReplayMismatchError
from utils.layout_data import parse_layout
from utils.manifest import RunManifest, compare_checksums

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser("replay", help="re-execute a guide run from its manifest and verify checksums")
    parser.add_argument("--manifest", required=True, help="manifest.json of a guide run")
    parser.add_argument("--out-dir", help="where to re-execute (default: a temporary directory)")
    parser.set_defaults(handler=run_replay)


def replay(manifest: RunManifest, out_dir: Path) -> list:
    """Re-run into out_dir; returns the artifact names whose checksums differ"""
    config = ToloConfig.from_dict(manifest.config)
    _, fresh = write_run(out_dir, parse_layout(manifest.layout), config, manifest.seed, manifest.dump_maps)
    return compare_checksums(manifest.checksums, fresh.checksums)


def run_replay(args) -> int:
    if not Path(args.manifest).is_file():
        raise FileNotFoundError(f"manifest not found: {args.manifest}")
    manifest = RunManifest.load(args.manifest)
    if args.out_dir:
        mismatched = replay(manifest, Path(args.out_dir))
    else:
        with tempfile.TemporaryDirectory(prefix="tolo-replay-") as tmp:
            mismatched = replay(manifest, Path(tmp))
    if mismatched:
        raise ReplayMismatchError(f"{len(mismatched)} artifacts differ: {', '.join(mismatched[:10])}")
    print(f"replay of {manifest.layout_id}: {len(manifest.checksums)} artifacts identical")
    return 0
