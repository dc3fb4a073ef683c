"""Toy differentiable cross-attention model standing in for a text-to-image U-Net.

Latent channels are average-pooled to each layer's resolution, projected to
queries, matched against projected token embeddings and soft-maxed over
tokens. Everything from the latent to the aggregated concept maps is recorded
on the tape so guidance gradients reach the latent.
"""
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np

from . import grid as G
from .config import EngineConfig
from .errors import InputError, ShapeError
from .grid import Grid2D, Tape
from .layout_data import Layout

logger = logging.getLogger(__name__)


def stream_rng(seed: int, *names) -> np.random.Generator:
    """Named, reproducible random stream derived from one seed"""
    digest = hashlib.sha256("/".join(str(n) for n in (seed,) + names).encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


@dataclass(frozen=True)
class TextEmbedding:
    tokens: Tuple[str, ...]
    matrix: np.ndarray

    @property
    def n_tokens(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class AttentionLayerSpec:
    layer_id: int
    resolution: Tuple[int, int]
    projection_q: np.ndarray
    projection_k: np.ndarray

    @property
    def d(self) -> int:
        return self.projection_q.shape[1]


@dataclass
class Latent:
    """Per-channel latent grids sharing one H x W shape"""

    channels: List[Grid2D]

    def __post_init__(self):
        if not self.channels:
            raise ShapeError("latent needs at least one channel")
        shape = self.channels[0].shape
        if any(c.shape != shape for c in self.channels):
            raise ShapeError("latent channels must share one shape")

    @property
    def height(self) -> int:
        return self.channels[0].height

    @property
    def width(self) -> int:
        return self.channels[0].width

    @property
    def d_z(self) -> int:
        return len(self.channels)

    def as_array(self) -> np.ndarray:
        return np.stack([c.data for c in self.channels])

    @classmethod
    def from_array(cls, values: np.ndarray) -> "Latent":
        return cls([Grid2D(v) for v in values])

    def attach(self, tape: Tape) -> "Latent":
        """Copy of this latent whose channels are gradient-requiring tape leaves"""
        return Latent([tape.leaf(c.data) for c in self.channels])

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))


def encode_prompt(prompt: Sequence[str], d_e: int, seed: int) -> TextEmbedding:
    """Deterministic unit-norm token rows keyed by (token label, seed)"""
    if not prompt:
        raise InputError("prompt must contain at least one token")
    if d_e < 1:
        raise InputError(f"embedding dimension must be positive, got {d_e}")
    rows = []
    for token in prompt:
        row = stream_rng(seed, "embedding", token).standard_normal(d_e)
        rows.append(row / np.linalg.norm(row))
    return TextEmbedding(tuple(prompt), np.array(rows))


def compute_attention(z: Latent, e: TextEmbedding, spec: AttentionLayerSpec) -> Grid2D:
    """Row-stochastic (h_l*w_l) x N attention map of one layer"""
    h_l, w_l = spec.resolution
    if spec.projection_q.shape[0] != z.d_z:
        raise ShapeError(f"query projection expects {spec.projection_q.shape[0]} channels, latent has {z.d_z}")
    if spec.projection_k.shape[0] != e.dim:
        raise ShapeError(f"key projection expects dim {spec.projection_k.shape[0]}, embedding has {e.dim}")
    if z.height % h_l or z.width % w_l:
        raise ShapeError(f"layer {h_l}x{w_l} does not pool from latent {z.height}x{z.width}")

    pooled = [G.avg_pool(channel, h_l, w_l) for channel in z.channels]
    queries = G.matmul(G.stack_columns(pooled), Grid2D(spec.projection_q))
    keys = Grid2D(e.matrix @ spec.projection_k)
    logits = G.divide_scalar(G.matmul(queries, G.transpose(keys)), math.sqrt(spec.d))
    return G.softmax_rows(logits)


def aggregate_concept_maps(stack: Sequence[Grid2D], resolutions: Sequence[Tuple[int, int]],
                           concepts: Sequence[Sequence[int]], map_size: int = 64) -> List[Grid2D]:
    """Per concept: upsample each token column, sum the concept's tokens, average the layers"""
    if len(stack) != len(resolutions) or not stack:
        raise ShapeError("need one resolution per attention layer")
    n_tokens = stack[0].width
    maps = []
    for concept in concepts:
        for index in concept:
            if not 0 <= index < n_tokens:
                raise InputError(f"token index {index} outside prompt of {n_tokens} tokens")
        total = None
        for layer, (h_l, w_l) in zip(stack, resolutions):
            for index in concept:
                column = G.upsample_bilinear(G.column_grid(layer, index, h_l, w_l), map_size, map_size)
                total = column if total is None else G.add(total, column)
        maps.append(G.divide_scalar(total, len(stack)))
    return maps


class Denoiser(Protocol):
    def step(self, z: Latent, t: int) -> Latent:
        ...


class ContractionDenoiser:
    """z <- gamma * z + (1 - gamma) * drift(seed, t), applied off-tape"""

    def __init__(self, shape: Tuple[int, int, int], seed: int, gamma: float = 0.98, drift_scale: float = 1.0):
        self.shape = shape
        self.seed = seed
        self.gamma = gamma
        self.drift_scale = drift_scale

    def drift(self, t: int) -> np.ndarray:
        return self.drift_scale * stream_rng(self.seed, "drift", t).standard_normal(self.shape)

    def step(self, z: Latent, t: int) -> Latent:
        if t < 1:
            raise InputError(f"denoiser timestep must be >= 1, got {t}")
        values = self.gamma * z.as_array() + (1.0 - self.gamma) * self.drift(t)
        return Latent.from_array(values)


@dataclass
class AttentionEngine:
    """One engine per run: fixed layer projections derived from the run seed"""

    config: EngineConfig
    seed: int
    layers: List[AttentionLayerSpec] = field(init=False)

    def __post_init__(self):
        self.config.validate()
        rng = stream_rng(self.seed, "projections")
        cfg = self.config
        self.layers = []
        for layer_id, resolution in enumerate(cfg.layer_resolutions):
            projection_q = rng.standard_normal((cfg.channels, cfg.proj_dim)) / math.sqrt(cfg.channels)
            projection_k = rng.standard_normal((cfg.embed_dim, cfg.proj_dim)) / math.sqrt(cfg.embed_dim)
            self.layers.append(AttentionLayerSpec(layer_id, tuple(resolution), projection_q, projection_k))

    @property
    def resolutions(self) -> List[Tuple[int, int]]:
        return [spec.resolution for spec in self.layers]

    def encode_prompt(self, prompt: Sequence[str]) -> TextEmbedding:
        return encode_prompt(prompt, self.config.embed_dim, self.seed)

    def init_latent(self) -> Latent:
        cfg = self.config
        values = stream_rng(self.seed, "init").standard_normal((cfg.channels, cfg.height, cfg.width))
        return Latent.from_array(values)

    def denoiser(self) -> ContractionDenoiser:
        cfg = self.config
        return ContractionDenoiser((cfg.channels, cfg.height, cfg.width), self.seed, cfg.gamma, cfg.drift_scale)

    def attention_stack(self, z: Latent, e: TextEmbedding) -> List[Grid2D]:
        return [compute_attention(z, e, spec) for spec in self.layers]

    def aggregate_concept_maps(self, stack: Sequence[Grid2D], layout: Layout) -> List[Grid2D]:
        layout.require_concepts()
        return aggregate_concept_maps(stack, self.resolutions, layout.concepts, self.config.map_size)

    def concept_maps(self, z: Latent, e: TextEmbedding, layout: Layout) -> List[Grid2D]:
        """Raw aggregated map M_i of every concept for the current latent"""
        return self.aggregate_concept_maps(self.attention_stack(z, e), layout)
