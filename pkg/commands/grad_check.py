import argparse
import logging

from utils.config import load_config
from utils.grad_check import DEFAULT_STEP, DEFAULT_TOLERANCE, check_gradients
from utils.grid_io import write_json

logger = logging.getLogger(__name__)


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def register(subparsers):
    parser = subparsers.add_parser("grad-check", help="compare tape gradients with finite differences")
    parser.add_argument("--seeds", type=positive_int, default=20, help="random instances to check (default 20)")
    parser.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE,
                        help="maximum allowed relative error (default 1e-3)")
    parser.add_argument("--step", type=float, default=DEFAULT_STEP, help="central-difference step")
    parser.add_argument("--probes", type=int, default=16,
                        help="latent coordinates probed per seed and loss; 0 probes all")
    parser.add_argument("--config", help="JSON config supplying engine geometry and loss weights")
    parser.add_argument("--out", help="write the report as JSON")
    parser.set_defaults(handler=run_grad_check)


def run_grad_check(args) -> int:
    config = load_config(args.config)
    report = check_gradients(config.engine, config.weights, args.seeds, probes=args.probes,
                             step=args.step, tolerance=args.tolerance)
    summary = report.to_dict()
    if args.out:
        write_json(args.out, summary)
    for loss, error in summary["per_loss"].items():
        print(f"{loss}: max relative error {error:.3e}")
    print(f"max relative error {report.max_error:.3e} (tolerance {args.tolerance:g}): "
          f"{'ok' if report.passed else 'FAILED'}")
    return 0 if report.passed else 3
