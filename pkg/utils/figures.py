import logging
from pathlib import Path
from typing import List, Sequence

import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from .grid_io import atomic_write
from .guidance_losses import ConceptMaps
from .scheduler import AGGREGATION, SEPARATION, TraceRecord

logger = logging.getLogger(__name__)

STAGE_COLORS = {AGGREGATION: '#1976D2', SEPARATION: '#FF5722'}


def concept_map_figure(concepts: Sequence[ConceptMaps], title: str) -> go.Figure:
    """One row per concept: raw map, normalized map, foreground mask with its box outline"""
    rows = len(concepts)
    titles = []
    for i in range(rows):
        titles += [f'concept {i} raw', f'concept {i} normalized', f'concept {i} mask']
    fig = make_subplots(rows=rows, cols=3, subplot_titles=titles,
                        horizontal_spacing=0.04, vertical_spacing=0.08 if rows > 1 else 0.1)

    for i, concept in enumerate(concepts, start=1):
        for col, grid in enumerate((concept.raw, concept.norm, concept.mask), start=1):
            fig.add_trace(
                go.Heatmap(z=grid.data, colorscale='Viridis', showscale=False),
                row=i, col=col
            )
        box_rows, box_cols = concept.box.data.nonzero()
        if box_rows.size:
            fig.add_shape(type='rect',
                          x0=box_cols.min() - 0.5, x1=box_cols.max() + 0.5,
                          y0=box_rows.min() - 0.5, y1=box_rows.max() + 0.5,
                          line=dict(color='#FF5722', width=2), row=i, col=3)

    fig.update_yaxes(autorange='reversed', showticklabels=False)
    fig.update_xaxes(showticklabels=False)
    fig.update_layout(title=title, height=280 * rows, width=840, showlegend=False)
    return fig


def trace_figure(trace: Sequence[TraceRecord], title: str) -> go.Figure:
    """Loss per guided step and mean pairwise mask overlap at every step"""
    frame = pd.DataFrame([
        {'t': r.t, 'stage': r.stage, 'loss': r.loss, 'mean_overlap': r.mean_overlap}
        for r in trace
    ])
    fig = make_subplots(rows=2, cols=1, shared_xaxes=True,
                        subplot_titles=('Guidance loss', 'Mean pairwise mask overlap'))

    for stage, color in STAGE_COLORS.items():
        part = frame[frame['stage'] == stage]
        if part.empty:
            continue
        fig.add_trace(
            go.Scatter(x=part['t'], y=part['loss'], name=stage, mode='lines+markers',
                       line=dict(color=color, width=3), marker=dict(size=6, color=color)),
            row=1, col=1
        )

    fig.add_trace(
        go.Scatter(x=frame['t'], y=frame['mean_overlap'], name='overlap', mode='lines',
                   line=dict(color='#4CAF50', width=2)),
        row=2, col=1
    )
    fig.update_xaxes(autorange='reversed', title_text='timestep t', row=2, col=1)
    fig.update_layout(title=title, height=600)
    return fig


def write_figure(path: Path, fig: go.Figure) -> Path:
    return atomic_write(path, fig.to_html(include_plotlyjs='cdn', full_html=True))


def write_figures(out_dir: Path, trace: List[TraceRecord], step_concepts: dict) -> List[Path]:
    """Write the trace figure plus one concept-map figure per dumped step"""
    out_dir = Path(out_dir)
    written = [write_figure(out_dir / 'trace.html', trace_figure(trace, 'Guidance trace'))]
    for t in sorted(step_concepts, reverse=True):
        fig = concept_map_figure(step_concepts[t], f'Concept maps at t={t}')
        written.append(write_figure(out_dir / f'maps_step_{t}.html', fig))
    logger.info("wrote %d figures to %s", len(written), out_dir)
    return written
