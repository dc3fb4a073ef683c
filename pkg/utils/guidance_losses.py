"""Aggregation and separation losses over aggregated concept maps.

Hard quantities (min/max of a map, the dynamic threshold, foreground masks,
bounding rectangles and the soft IoU) are treated as constants for
gradients. Gradients flow through the normalized map, its sigmoid
sharpening, the straight-through rectangle and the Sobel edge map.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import grid as G
from .config import LossWeights
from .errors import InputError, ShapeError
from .grid import Grid2D
from .layout_data import Box

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetachedState:
    """Values held constant by the loss; replaying them makes the loss smooth"""

    m_min: float
    m_max: float
    tau: float
    mask: np.ndarray
    mbr: np.ndarray
    iou: float
    st_offset: np.ndarray


@dataclass
class ConceptMaps:
    raw: Grid2D
    box: Grid2D
    norm: Grid2D
    tau: float
    mask: Grid2D
    masked_norm: Grid2D
    mbr: Grid2D
    mbr_st: Grid2D
    sharp: Grid2D
    soft_iou: float
    edges: Grid2D
    bounds: Tuple[float, float]

    def detached_state(self) -> DetachedState:
        return DetachedState(
            m_min=self.bounds[0],
            m_max=self.bounds[1],
            tau=self.tau,
            mask=self.mask.data,
            mbr=self.mbr.data,
            iou=self.soft_iou,
            st_offset=self.mbr.data - self.norm.data,
        )


def rasterize_box(box: Box, map_size: int = 64, canvas_size: int = 512) -> Grid2D:
    """Binary map of the cells whose centers fall inside the box (half-open)"""
    x_min, y_min, x_max, y_max = box
    centers = (np.arange(map_size) + 0.5) * (canvas_size / map_size)
    cols = (centers >= x_min) & (centers < x_max)
    rows = (centers >= y_min) & (centers < y_max)
    return Grid2D(np.outer(rows, cols).astype(np.float64))


def normalize_map(m: Grid2D, bounds: Optional[Tuple[float, float]] = None) -> Grid2D:
    """(M - min) / (max - min) with min and max detached; all zeros when flat"""
    m_min, m_max = bounds if bounds is not None else (G.reduce_min(m), G.reduce_max(m))
    if m_max == m_min:
        return G.scale(m, 0.0)
    return G.divide_scalar(G.add_scalar(m, -m_min), m_max - m_min)


def dynamic_threshold(m_norm: Grid2D, box: Grid2D, lam: float) -> float:
    """lam * mean inside the box + (1 - lam) * mean outside it"""
    _check_shapes("dynamic_threshold", m_norm, box)
    inside = box.data.sum()
    outside = box.data.size - inside
    if inside == 0 or outside == 0:
        raise InputError("dynamic threshold needs a box with cells both inside and outside")
    inside_mean = (m_norm.data * box.data).sum() / inside
    outside_mean = (m_norm.data * (1.0 - box.data)).sum() / outside
    return float(lam * inside_mean + (1.0 - lam) * outside_mean)


def foreground_mask(m_norm: Grid2D, tau: float) -> Grid2D:
    return Grid2D((m_norm.data >= tau).astype(np.float64))


def mbr(mask: Grid2D) -> Grid2D:
    """Minimum bounding rectangle of the mask's 1-cells; empty mask gives zeros"""
    rows = np.flatnonzero(mask.data.any(axis=1))
    out = np.zeros(mask.shape)
    if rows.size:
        cols = np.flatnonzero(mask.data.any(axis=0))
        out[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1] = 1.0
    return Grid2D(out)


def straight_through_box(rect: Grid2D, m_norm: Grid2D) -> Grid2D:
    """Forward value is the rectangle; the gradient is that of m_norm"""
    _check_shapes("straight_through_box", rect, m_norm)
    return G.straight_through(rect, m_norm)


def soft_iou(rect: Grid2D, box: Grid2D) -> float:
    """sum(b_hat * b) / sum(b_hat + (1 - b_hat) * b), 0 for an empty union"""
    _check_shapes("soft_iou", rect, box)
    union = (rect.data + (1.0 - rect.data) * box.data).sum()
    if union == 0:
        return 0.0
    return float((rect.data * box.data).sum() / union)


def sharpen(m_norm: Grid2D, tau: float, sharpness: float) -> Grid2D:
    return G.sigmoid(G.scale(G.add_scalar(m_norm, -tau), sharpness))


def build_concept_maps(raw: Grid2D, box: Grid2D, weights: LossWeights,
                       frozen: Optional[DetachedState] = None) -> ConceptMaps:
    """Derive every per-concept quantity from a raw aggregated map.

    With ``frozen`` the detached values come from an earlier evaluation
    instead of being recomputed, which is what a finite-difference oracle
    needs.
    """
    _check_shapes("build_concept_maps", raw, box)
    if frozen is None:
        bounds = (G.reduce_min(raw), G.reduce_max(raw))
        norm = normalize_map(raw, bounds)
        tau = dynamic_threshold(norm, box, weights.lam)
        mask = foreground_mask(norm, tau)
        rect = mbr(mask)
        iou = soft_iou(rect, box)
        rect_st = straight_through_box(rect, norm)
    else:
        bounds = (frozen.m_min, frozen.m_max)
        norm = normalize_map(raw, bounds)
        tau, mask, rect, iou = frozen.tau, Grid2D(frozen.mask), Grid2D(frozen.mbr), frozen.iou
        rect_st = G.add(Grid2D(frozen.st_offset), norm)
    return ConceptMaps(
        raw=raw,
        box=box,
        norm=norm,
        tau=tau,
        mask=mask,
        masked_norm=G.hadamard(mask, norm),
        mbr=rect,
        mbr_st=rect_st,
        sharp=sharpen(norm, tau, weights.sharpness),
        soft_iou=iou,
        edges=G.sobel(raw),
        bounds=bounds,
    )


def _check_shapes(op: str, a: Grid2D, b: Grid2D) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _ratio(numerator: Grid2D, denominator: Grid2D, eps: float) -> Grid2D:
    if denominator.item() == 0:
        return G.divide_scalar(numerator, eps)
    return G.divide(numerator, denominator)


def _sum_terms(terms: Sequence[Grid2D]) -> Grid2D:
    if not terms:
        return G.scalar(0.0)
    total = terms[0]
    for term in terms[1:]:
        total = G.add(total, term)
    return total


def _inside_fraction(values: Grid2D, box: Grid2D) -> Optional[Grid2D]:
    total = G.reduce_sum(values)
    if total.item() == 0:
        return None
    return G.divide(G.reduce_sum(G.hadamard(values, box)), total)


def region_loss(concept: ConceptMaps, weights: LossWeights) -> Grid2D:
    """(1 - IoU) * (lambda_s * (1 - sharp mass inside) + lambda_a * (1 - rectangle mass inside))"""
    terms = []
    sharp_inside = _inside_fraction(concept.sharp, concept.box)
    if sharp_inside is not None:
        terms.append(G.scale(G.one_minus(sharp_inside), weights.lambda_s))
    rect_inside = _inside_fraction(concept.mbr_st, concept.box)
    if rect_inside is not None:
        terms.append(G.scale(G.one_minus(rect_inside), weights.lambda_a))
    return G.scale(_sum_terms(terms), 1.0 - concept.soft_iou)


def boundary_loss(concept: ConceptMaps) -> Grid2D:
    """(1 - IoU) * (1 - edge mass inside the box); 0 for an edgeless map"""
    edges_inside = _inside_fraction(concept.edges, concept.box)
    if edges_inside is None:
        return G.scalar(0.0)
    return G.scale(G.one_minus(edges_inside), 1.0 - concept.soft_iou)


def aggregation_loss(concepts: Sequence[ConceptMaps], weights: LossWeights) -> Grid2D:
    if not concepts:
        raise InputError("aggregation loss needs at least one concept")
    return _sum_terms([G.add(region_loss(c, weights), boundary_loss(c)) for c in concepts])


def pair_overlap_term(ci: ConceptMaps, cj: ConceptMaps, eps: float) -> Grid2D:
    """sum(mask_i * masked_norm_j) / sum(masked_norm_j)"""
    numerator = G.reduce_sum(G.hadamard(ci.mask, cj.masked_norm))
    return _ratio(numerator, G.reduce_sum(cj.masked_norm), eps)


def separation_loss(concepts: Sequence[ConceptMaps], eps: float = 1e-6) -> Grid2D:
    """Mean overlap over the k(k-1) ordered concept pairs; 0 for one concept"""
    k = len(concepts)
    if k < 2:
        return G.scalar(0.0)
    terms = [pair_overlap_term(concepts[i], concepts[j], eps)
             for i in range(k) for j in range(k) if i != j]
    return G.divide_scalar(_sum_terms(terms), k * (k - 1))


def pair_overlaps(concepts: Sequence[ConceptMaps], eps: float = 1e-6) -> Dict[Tuple[int, int], float]:
    """Forward value of every ordered pair's overlap term"""
    return {
        (i, j): _overlap_value(ci, cj, eps)
        for i, ci in enumerate(concepts) for j, cj in enumerate(concepts) if i != j
    }


def _overlap_value(ci: ConceptMaps, cj: ConceptMaps, eps: float) -> float:
    masked = cj.masked_norm.data
    denominator = masked.sum()
    numerator = (ci.mask.data * masked).sum()
    return float(numerator / (denominator if denominator != 0 else eps))


def loss_report(concepts: Sequence[ConceptMaps], weights: LossWeights) -> Dict:
    """Forward values of every loss term, keyed for JSON export"""
    return {
        "per_concept": [
            {
                "tau": c.tau,
                "iou": c.soft_iou,
                "region": region_loss(c, weights).item(),
                "boundary": boundary_loss(c).item(),
            }
            for c in concepts
        ],
        "l_agg": aggregation_loss(concepts, weights).item(),
        "l_sep": separation_loss(concepts, weights.eps).item(),
        "pair_overlaps": {f"{i}->{j}": v for (i, j), v in pair_overlaps(concepts, weights.eps).items()},
    }
