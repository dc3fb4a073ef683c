"""Finite-difference oracle for the guidance losses.

The oracle re-evaluates the loss with every detached quantity frozen at the
base point, so it differentiates exactly the function the tape does.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .attention import AttentionEngine, Latent, stream_rng
from .config import EngineConfig, LossWeights
from .errors import InputError
from .grid import Tape
from .guidance_losses import (
    DetachedState,
    aggregation_loss,
    build_concept_maps,
    rasterize_box,
    separation_loss,
)
from .layout_data import Layout

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-3
DEFAULT_TOLERANCE = 1e-3

CHECK_LAYOUT = Layout(
    id="grad-check",
    prompt=("a", "red", "apple", "and", "a", "yellow", "clock"),
    boxes=((64.0, 64.0, 320.0, 320.0), (192.0, 160.0, 448.0, 416.0)),
    concepts=((1, 2), (5, 6)),
)

LOSSES = ("l_agg", "l_sep")


def central_differences(fn: Callable[[np.ndarray], float], point: np.ndarray,
                        coordinates: Sequence[tuple], step: float = DEFAULT_STEP) -> np.ndarray:
    """Central-difference partial derivatives of fn at the given coordinates"""
    estimates = []
    for coordinate in coordinates:
        plus = point.copy()
        minus = point.copy()
        plus[coordinate] += step
        minus[coordinate] -= step
        estimates.append((fn(plus) - fn(minus)) / (2.0 * step))
    return np.array(estimates)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest componentwise deviation, relative to the largest gradient component"""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    deviation = np.abs(analytic - numeric).max(initial=0.0)
    if scale == 0:
        return 0.0 if deviation == 0 else float("inf")
    return float(deviation / scale)


class LossProbe:
    """Evaluates one guidance loss on a fixed engine, prompt and layout"""

    def __init__(self, engine: AttentionEngine, layout: Layout, weights: LossWeights, loss: str):
        if loss not in LOSSES:
            raise InputError(f"unknown loss {loss!r}")
        self.engine = engine
        self.layout = layout
        self.weights = weights
        self.loss = loss
        self.embedding = engine.encode_prompt(layout.prompt)
        cfg = engine.config
        self.boxes = [rasterize_box(b, cfg.map_size, cfg.canvas_size) for b in layout.boxes]

    def _evaluate(self, z: Latent, frozen: Optional[List[DetachedState]]):
        raw_maps = self.engine.concept_maps(z, self.embedding, self.layout)
        concepts = [
            build_concept_maps(raw, box, self.weights, None if frozen is None else frozen[i])
            for i, (raw, box) in enumerate(zip(raw_maps, self.boxes))
        ]
        if self.loss == "l_agg":
            return aggregation_loss(concepts, self.weights), concepts
        return separation_loss(concepts, self.weights.eps), concepts

    def analytic(self, values: np.ndarray):
        """Tape gradient at ``values`` and the detached state of that evaluation"""
        tape = Tape()
        z = Latent.from_array(values).attach(tape)
        loss, concepts = self._evaluate(z, None)
        frozen = [c.detached_state() for c in concepts]
        if loss.node is None:
            return np.zeros_like(values), frozen
        grads = tape.backward(loss)
        return np.stack([grads[c.node].data for c in z.channels]), frozen

    def frozen_value(self, values: np.ndarray, frozen: List[DetachedState]) -> float:
        loss, _ = self._evaluate(Latent.from_array(values), frozen)
        return loss.item()


@dataclass
class GradCheckReport:
    tolerance: float
    errors: Dict[str, List[float]] = field(default_factory=lambda: {name: [] for name in LOSSES})

    @property
    def max_error(self) -> float:
        return float(max((max(v) for v in self.errors.values() if v), default=0.0))

    @property
    def passed(self) -> bool:
        return bool(self.max_error <= self.tolerance)

    def to_dict(self) -> Dict:
        return {
            "tolerance": self.tolerance,
            "max_relative_error": self.max_error,
            "per_loss": {name: float(max(v)) if v else 0.0 for name, v in self.errors.items()},
            "seeds": len(next(iter(self.errors.values()))),
            "passed": self.passed,
        }


def check_gradients(engine_config: EngineConfig, weights: LossWeights, seeds: int,
                    probes: int = 16, step: float = DEFAULT_STEP,
                    tolerance: float = DEFAULT_TOLERANCE, layout: Layout = CHECK_LAYOUT) -> GradCheckReport:
    """Compare tape gradients of both losses with central differences over several seeds.

    ``probes`` random latent coordinates are checked per seed and loss; 0
    checks every coordinate.
    """
    report = GradCheckReport(tolerance)
    for seed in range(seeds):
        engine = AttentionEngine(engine_config, seed)
        values = engine.init_latent().as_array()
        coordinates = _probe_coordinates(values.shape, probes, seed)
        for loss in LOSSES:
            probe = LossProbe(engine, layout, weights, loss)
            analytic, frozen = probe.analytic(values)
            numeric = central_differences(lambda v: probe.frozen_value(v, frozen), values, coordinates, step)
            picked = np.array([analytic[c] for c in coordinates])
            error = max_relative_error(picked, numeric)
            report.errors[loss].append(error)
            logger.debug("seed=%d %s max relative error %.3e", seed, loss, error)
    logger.info("gradient check over %d seeds: max relative error %.3e", seeds, report.max_error)
    return report


def _probe_coordinates(shape: tuple, probes: int, seed: int) -> List[tuple]:
    every = [tuple(int(i) for i in idx) for idx in np.ndindex(*shape)]
    if probes <= 0 or probes >= len(every):
        return every
    picks = stream_rng(seed, "probes").choice(len(every), size=probes, replace=False)
    return [every[i] for i in sorted(picks)]
