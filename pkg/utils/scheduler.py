import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .attention import AttentionEngine, Denoiser, Latent, TextEmbedding
from .config import GuidanceConfig, LossWeights
from .errors import GuidanceDivergedError, InputError, NumericError
from .grid import Grid2D, Tape
from .guidance_losses import (
    ConceptMaps,
    aggregation_loss,
    build_concept_maps,
    pair_overlaps,
    rasterize_box,
    separation_loss,
)
from .layout_data import Layout, layout_iou

logger = logging.getLogger(__name__)

AGGREGATION = "aggregation"
SEPARATION = "separation"
NONE = "none"

TWO_STAGE = "two-stage"
ONE_STAGE = "one-stage"

MapSink = Callable[[int, List[Grid2D]], None]


@dataclass
class TraceRecord:
    t: int
    stage: str
    loss: Optional[float]
    grad_norm: Optional[float]
    pair_overlaps: Dict[str, float] = field(default_factory=dict)
    taus: List[float] = field(default_factory=list)
    ious: List[float] = field(default_factory=list)

    @property
    def mean_overlap(self) -> float:
        if not self.pair_overlaps:
            return 0.0
        return float(np.mean(list(self.pair_overlaps.values())))

    def to_dict(self) -> Dict:
        return {
            "t": self.t,
            "stage": self.stage,
            "loss": self.loss,
            "grad_norm": self.grad_norm,
            "pair_overlaps": dict(self.pair_overlaps),
            "taus": list(self.taus),
            "ious": list(self.ious),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "TraceRecord":
        return cls(**data)


@dataclass
class GuidanceResult:
    latent: Latent
    trace: List[TraceRecord]
    mode: str
    schedule: GuidanceConfig

    def stage_counts(self) -> Dict[str, int]:
        counts = {AGGREGATION: 0, SEPARATION: 0, NONE: 0}
        for record in self.trace:
            counts[record.stage] += 1
        return counts

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {"t": r.t, "stage": r.stage, "loss": r.loss, "grad_norm": r.grad_norm,
                 "mean_overlap": r.mean_overlap}
                for r in self.trace
            ]
        )


def stage_for(t: int, cfg: GuidanceConfig) -> str:
    """Aggregation while t > T-m, separation while T-n < t <= T-m, otherwise none"""
    if not 1 <= t <= cfg.T:
        raise InputError(f"timestep {t} outside 1..{cfg.T}")
    if t > cfg.T - cfg.m:
        return AGGREGATION
    if t > cfg.T - cfg.n:
        return SEPARATION
    return NONE


def select_mode(layout: Layout, cfg: GuidanceConfig) -> str:
    """Two-stage only when the layout's max pairwise IoU exceeds the threshold"""
    if cfg.mode != "auto":
        raise InputError(f"select_mode applies to mode 'auto', got {cfg.mode!r}")
    return TWO_STAGE if layout_iou(layout) > cfg.iou_threshold else ONE_STAGE


def resolve_schedule(layout: Layout, cfg: GuidanceConfig) -> Tuple[str, GuidanceConfig]:
    """Concrete mode plus the schedule it implies; one-stage runs aggregation for all n steps"""
    mode = select_mode(layout, cfg) if cfg.mode == "auto" else cfg.mode
    if mode == ONE_STAGE:
        return mode, replace(cfg, m=cfg.n, mode=ONE_STAGE)
    return mode, replace(cfg, mode=TWO_STAGE)


class GuidedDenoising:
    """Denoising loop with one loss-guided latent update per intervention step"""

    def __init__(self, engine: AttentionEngine, cfg: GuidanceConfig, weights: LossWeights,
                 denoiser: Optional[Denoiser] = None):
        self.engine = engine
        self.cfg = cfg.validate()
        self.weights = weights.validate()
        self.denoiser = denoiser or engine.denoiser()

    def rasterize_layout(self, layout: Layout) -> List[Grid2D]:
        """Box masks on the map grid; each must leave cells both inside and outside"""
        cfg = self.engine.config
        boxes = [rasterize_box(box, cfg.map_size, cfg.canvas_size) for box in layout.boxes]
        for index, (box, mask) in enumerate(zip(layout.boxes, boxes)):
            covered = int(mask.data.sum())
            if covered == 0 or covered == mask.data.size:
                extent = "no cell" if covered == 0 else "every cell"
                raise InputError(
                    f"layout {layout.id}: box {index} {list(box)} covers {extent} of the "
                    f"{cfg.map_size}x{cfg.map_size} map"
                )
        return boxes

    def concepts_for(self, z: Latent, e: TextEmbedding, layout: Layout,
                     boxes: Optional[List[Grid2D]] = None) -> List[ConceptMaps]:
        raw_maps = self.engine.concept_maps(z, e, layout)
        if boxes is None:
            boxes = self.rasterize_layout(layout)
        return [build_concept_maps(raw, box, self.weights) for raw, box in zip(raw_maps, boxes)]

    def stage_loss(self, stage: str, concepts: List[ConceptMaps]) -> Grid2D:
        if stage == AGGREGATION:
            return aggregation_loss(concepts, self.weights)
        return separation_loss(concepts, self.weights.eps)

    def run(self, layout: Layout, map_sink: Optional[MapSink] = None) -> GuidanceResult:
        layout.require_concepts()
        boxes = self.rasterize_layout(layout)
        mode, schedule = resolve_schedule(layout, self.cfg)
        e = self.engine.encode_prompt(layout.prompt)
        latent = self.engine.init_latent()
        trace = []
        logger.info("guiding layout %s: mode=%s T=%d m=%d n=%d alpha=%g",
                    layout.id, mode, schedule.T, schedule.m, schedule.n, schedule.alpha)

        for t in range(schedule.T, 0, -1):
            stage = stage_for(t, schedule)
            try:
                latent, record = self._step(t, stage, latent, e, layout, boxes, schedule, map_sink)
            except GuidanceDivergedError:
                raise
            except NumericError as err:
                raise GuidanceDivergedError(t, stage, str(err)) from err
            trace.append(record)
        return GuidanceResult(latent, trace, mode, schedule)

    def _step(self, t: int, stage: str, latent: Latent, e: TextEmbedding, layout: Layout,
              boxes: List[Grid2D], schedule: GuidanceConfig, map_sink: Optional[MapSink]):
        tape = Tape()
        z = latent.attach(tape) if stage != NONE else latent
        concepts = self.concepts_for(z, e, layout, boxes)
        if map_sink is not None:
            map_sink(t, [c.raw.detach() for c in concepts])

        overlaps = {f"{i}->{j}": v for (i, j), v in pair_overlaps(concepts, self.weights.eps).items()}
        record = TraceRecord(t, stage, None, None, overlaps,
                             [c.tau for c in concepts], [c.soft_iou for c in concepts])

        if stage != NONE:
            loss = self.stage_loss(stage, concepts)
            gradients = self._gradients(tape, loss, z)
            grad_norm = math.sqrt(sum(float((g * g).sum()) for g in gradients))
            if not (math.isfinite(loss.item()) and math.isfinite(grad_norm)):
                raise GuidanceDivergedError(t, stage, "loss or gradient is not finite")
            updated = latent.as_array() - schedule.alpha * np.stack(gradients)
            latent = Latent.from_array(updated)
            record.loss = loss.item()
            record.grad_norm = grad_norm
            logger.info("t=%d %s loss=%.6f grad_norm=%.6f", t, stage, record.loss, grad_norm)
        else:
            logger.debug("t=%d unguided, mean overlap %.4f", t, record.mean_overlap)

        return self.denoiser.step(latent, t), record

    @staticmethod
    def _gradients(tape: Tape, loss: Grid2D, z: Latent) -> List[np.ndarray]:
        if loss.node is None:
            return [np.zeros(c.shape) for c in z.channels]
        grads = tape.backward(loss)
        return [grads[c.node].data for c in z.channels]


def run(layout: Layout, engine: AttentionEngine, cfg: GuidanceConfig,
        weights: Optional[LossWeights] = None, map_sink: Optional[MapSink] = None) -> GuidanceResult:
    """Guided denoising of one layout; fully determined by the engine's seed"""
    return GuidedDenoising(engine, cfg, weights or LossWeights()).run(layout, map_sink)
