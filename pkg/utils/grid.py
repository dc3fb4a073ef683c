"""Dense 2D grids with a minimal reverse-mode differentiation tape.

A ``Grid2D`` without a tape node is a constant: its buffer is read-only and it
can be shared freely. Operations on tape-bound grids append one node to the
tape holding the forward value and a closure mapping the output gradient to
one gradient per input. Scalars are 1x1 grids.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, NumericError, ShapeError

logger = logging.getLogger(__name__)

SOBEL_EPS = 1e-12

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T.copy()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeNode:
    op: str
    parents: Tuple[Optional[int], ...]
    value: np.ndarray
    backward_fn: Optional[BackwardFn] = None
    requires_grad: bool = False


class Tape:
    """Append-only record of operations; node ids are list positions"""

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.visits = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, parents: Tuple[Optional[int], ...], value: np.ndarray,
               backward_fn: Optional[BackwardFn] = None, requires_grad: bool = False) -> int:
        for parent in parents:
            if parent is not None and parent >= len(self.nodes):
                raise ContractError(f"parent node {parent} does not precede {op}")
        self.nodes.append(TapeNode(op, parents, value, backward_fn, requires_grad))
        return len(self.nodes) - 1

    def leaf(self, data, requires_grad: bool = True) -> "Grid2D":
        """Register a leaf grid on this tape"""
        grid = Grid2D(data)
        node = self.record("leaf", (), grid.data, requires_grad=requires_grad)
        return Grid2D(grid.data, node=node, tape=self)

    def backward(self, loss: "Grid2D") -> Dict[int, "Grid2D"]:
        """Reverse accumulation from a scalar node.

        Returns a constant gradient grid for every leaf that requires a
        gradient, zeros for leaves the loss does not depend on.
        """
        if loss.tape is not self or loss.node is None:
            raise ContractError("backward root is not a node of this tape")
        if loss.shape != (1, 1):
            raise ContractError(f"backward root must be scalar, got shape {loss.shape}")

        pending: Dict[int, np.ndarray] = {loss.node: np.ones((1, 1))}
        gradients: Dict[int, Grid2D] = {}
        for index in range(loss.node, -1, -1):
            self.visits += 1
            grad = pending.pop(index, None)
            node = self.nodes[index]
            if grad is None:
                continue
            if node.backward_fn is None:
                if node.requires_grad:
                    gradients[index] = Grid2D(grad)
                continue
            for parent, parent_grad in zip(node.parents, node.backward_fn(grad)):
                if parent is None or parent_grad is None:
                    continue
                if parent in pending:
                    pending[parent] = pending[parent] + parent_grad
                else:
                    pending[parent] = parent_grad

        for index, node in enumerate(self.nodes):
            if node.requires_grad and index not in gradients:
                gradients[index] = Grid2D(np.zeros_like(node.value))
        return gradients


class Grid2D:
    """Row-major 2D field of float64 values, optionally bound to a tape node"""

    __slots__ = ("data", "node", "tape")

    def __init__(self, data, node: Optional[int] = None, tape: Optional[Tape] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"grid needs a positive 2D shape, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("grid contains NaN or Inf")
        arr.setflags(write=False)
        self.data = arr
        self.node = node
        self.tape = tape if node is not None else None

    def __repr__(self) -> str:
        kind = "constant" if self.node is None else f"node={self.node}"
        return f"Grid2D({self.height}x{self.width}, {kind})"

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    @property
    def is_constant(self) -> bool:
        return self.node is None

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 grid, got {self.shape}")
        return float(self.data[0, 0])

    def detach(self) -> "Grid2D":
        return Grid2D(self.data)

    @classmethod
    def full(cls, height: int, width: int, value: float) -> "Grid2D":
        return cls(np.full((height, width), float(value)))

    @classmethod
    def zeros(cls, height: int, width: int) -> "Grid2D":
        return cls.full(height, width, 0.0)

    @classmethod
    def ones(cls, height: int, width: int) -> "Grid2D":
        return cls.full(height, width, 1.0)


def scalar(value: float) -> Grid2D:
    return Grid2D([[value]])


def _shared_tape(inputs: Sequence[Grid2D]) -> Optional[Tape]:
    tape = None
    for grid in inputs:
        if grid.tape is None:
            continue
        if tape is None:
            tape = grid.tape
        elif grid.tape is not tape:
            raise ContractError("operands belong to different tapes")
    return tape


def _apply(op: str, inputs: Sequence[Grid2D], value: np.ndarray, backward_fn: BackwardFn) -> Grid2D:
    tape = _shared_tape(inputs)
    if tape is None:
        return Grid2D(value)
    out = Grid2D(value)
    node = tape.record(op, tuple(g.node for g in inputs), out.data, backward_fn)
    return Grid2D(out.data, node=node, tape=tape)


def _require_same_shape(op: str, a: Grid2D, b: Grid2D) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# Elementwise and scalar operations

def add(a: Grid2D, b: Grid2D) -> Grid2D:
    _require_same_shape("add", a, b)
    return _apply("add", (a, b), a.data + b.data, lambda g: (g, g))


def subtract(a: Grid2D, b: Grid2D) -> Grid2D:
    _require_same_shape("subtract", a, b)
    return _apply("subtract", (a, b), a.data - b.data, lambda g: (g, -g))


def hadamard(a: Grid2D, b: Grid2D) -> Grid2D:
    _require_same_shape("hadamard", a, b)
    a_val, b_val = a.data, b.data
    return _apply("hadamard", (a, b), a_val * b_val, lambda g: (g * b_val, g * a_val))


def divide(a: Grid2D, b: Grid2D) -> Grid2D:
    """Elementwise quotient; used for ratios of scalar reductions"""
    _require_same_shape("divide", a, b)
    a_val, b_val = a.data, b.data
    if np.any(b_val == 0):
        raise NumericError("divide: zero denominator")
    return _apply("divide", (a, b), a_val / b_val,
                  lambda g: (g / b_val, -g * a_val / (b_val * b_val)))


def scale(g: Grid2D, factor: float) -> Grid2D:
    factor = float(factor)
    return _apply("scale", (g,), g.data * factor, lambda grad: (grad * factor,))


def divide_scalar(g: Grid2D, divisor: float) -> Grid2D:
    divisor = float(divisor)
    if divisor == 0:
        raise NumericError("divide_scalar: zero divisor")
    return _apply("divide_scalar", (g,), g.data / divisor, lambda grad: (grad / divisor,))


def add_scalar(g: Grid2D, offset: float) -> Grid2D:
    offset = float(offset)
    return _apply("add_scalar", (g,), g.data + offset, lambda grad: (grad,))


def one_minus(g: Grid2D) -> Grid2D:
    return _apply("one_minus", (g,), 1.0 - g.data, lambda grad: (-grad,))


def sigmoid(g: Grid2D) -> Grid2D:
    out = 1.0 / (1.0 + np.exp(-g.data))
    return _apply("sigmoid", (g,), out, lambda grad: (grad * out * (1.0 - out),))


def stop_gradient(g: Grid2D) -> Grid2D:
    return g.detach()


def straight_through(hard: Grid2D, soft: Grid2D) -> Grid2D:
    """Forward value of ``hard``, gradient routed to ``soft`` unchanged"""
    _require_same_shape("straight_through", hard, soft)
    return _apply("straight_through", (hard.detach(), soft), hard.data.copy(),
                  lambda grad: (None, grad))


# Reductions; min and max are detached by construction

def reduce_sum(g: Grid2D) -> Grid2D:
    shape = g.shape
    return _apply("reduce_sum", (g,), np.array([[g.data.sum()]]),
                  lambda grad: (np.full(shape, grad[0, 0]),))


def reduce_min(g: Grid2D) -> float:
    return float(g.data.min())


def reduce_max(g: Grid2D) -> float:
    return float(g.data.max())


# Matrix operations

def matmul(a: Grid2D, b: Grid2D) -> Grid2D:
    if a.width != b.height:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} x {b.shape})")
    a_val, b_val = a.data, b.data
    return _apply("matmul", (a, b), a_val @ b_val, lambda g: (g @ b_val.T, a_val.T @ g))


def transpose(g: Grid2D) -> Grid2D:
    return _apply("transpose", (g,), g.data.T.copy(), lambda grad: (grad.T,))


def softmax_rows(m: Grid2D) -> Grid2D:
    shifted = m.data - m.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=1, keepdims=True)

    def backward(grad):
        inner = (grad * out).sum(axis=1, keepdims=True)
        return (out * (grad - inner),)

    return _apply("softmax_rows", (m,), out, backward)


def stack_columns(grids: Sequence[Grid2D]) -> Grid2D:
    """Flatten each grid row-major into one column of an (h*w) x len(grids) matrix"""
    if not grids:
        raise ShapeError("stack_columns needs at least one grid")
    shape = grids[0].shape
    for grid in grids:
        _require_same_shape("stack_columns", grids[0], grid)
    value = np.stack([grid.data.reshape(-1) for grid in grids], axis=1)

    def backward(grad):
        return tuple(grad[:, j].reshape(shape) for j in range(len(grids)))

    return _apply("stack_columns", tuple(grids), value, backward)


def column_grid(m: Grid2D, column: int, height: int, width: int) -> Grid2D:
    """Column ``column`` of ``m`` reshaped row-major to height x width"""
    if m.height != height * width:
        raise ShapeError(f"column_grid: {m.height} rows cannot form {height}x{width}")
    if not 0 <= column < m.width:
        raise ShapeError(f"column_grid: column {column} outside 0..{m.width - 1}")
    shape = m.shape

    def backward(grad):
        full = np.zeros(shape)
        full[:, column] = grad.reshape(-1)
        return (full,)

    return _apply("column_grid", (m,), m.data[:, column].reshape(height, width), backward)


# Resampling

def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape (n_out, n_in)"""
    mat = np.zeros((n_out, n_in))
    if n_in == 1:
        mat[:, 0] = 1.0
        return mat
    if n_out == 1:
        mat[0, 0] = 1.0
        return mat
    positions = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lower = np.minimum(np.floor(positions).astype(int), n_in - 2)
    frac = positions - lower
    rows = np.arange(n_out)
    mat[rows, lower] = 1.0 - frac
    mat[rows, lower + 1] += frac
    return mat


def pooling_matrix(n_in: int, n_out: int) -> np.ndarray:
    if n_in % n_out:
        raise ShapeError(f"cannot average-pool {n_in} cells into {n_out}")
    factor = n_in // n_out
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        mat[i, i * factor:(i + 1) * factor] = 1.0 / factor
    return mat


def _separable(op: str, g: Grid2D, rows: np.ndarray, cols: np.ndarray) -> Grid2D:
    return _apply(op, (g,), rows @ g.data @ cols.T, lambda grad: (rows.T @ grad @ cols,))


def upsample_bilinear(g: Grid2D, out_h: int, out_w: int) -> Grid2D:
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"upsample target {out_h}x{out_w} must be positive")
    if g.shape == (out_h, out_w):
        return g
    return _separable("upsample_bilinear", g,
                      interpolation_matrix(g.height, out_h), interpolation_matrix(g.width, out_w))


def avg_pool(g: Grid2D, out_h: int, out_w: int) -> Grid2D:
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"pool target {out_h}x{out_w} must be positive")
    if g.shape == (out_h, out_w):
        return g
    return _separable("avg_pool", g, pooling_matrix(g.height, out_h), pooling_matrix(g.width, out_w))


# Edge detection

def _sobel_components(padded: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Separable Sobel responses; differences come first so flat regions give exact zeros"""
    diff_x = padded[:, 2:] - padded[:, :-2]
    diff_y = padded[2:, :] - padded[:-2, :]
    gx = diff_x[:-2] + 2.0 * diff_x[1:-1] + diff_x[2:]
    gy = diff_y[:, :-2] + 2.0 * diff_y[:, 1:-1] + diff_y[:, 2:]
    return gx, gy


def _correlate_transpose(grad: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    height, width = grad.shape
    padded = np.zeros((height + 2, width + 2))
    for di in range(3):
        for dj in range(3):
            if kernel[di, dj]:
                padded[di:di + height, dj:dj + width] += kernel[di, dj] * grad
    return padded


def _fold_replicate_padding(padded: np.ndarray) -> np.ndarray:
    grad = padded[1:-1, 1:-1].copy()
    grad[0, :] += padded[0, 1:-1]
    grad[-1, :] += padded[-1, 1:-1]
    grad[:, 0] += padded[1:-1, 0]
    grad[:, -1] += padded[1:-1, -1]
    grad[0, 0] += padded[0, 0]
    grad[0, -1] += padded[0, -1]
    grad[-1, 0] += padded[-1, 0]
    grad[-1, -1] += padded[-1, -1]
    return grad


def sobel(g: Grid2D) -> Grid2D:
    """Sobel gradient magnitude with replicate-padded borders.

    The magnitude is sqrt(gx^2 + gy^2 + eps^2) - eps, evaluated as
    s / (sqrt(s + eps^2) + eps) so that flat regions give exactly zero while
    the derivative stays defined there.
    """
    if g.height < 3 or g.width < 3:
        raise ShapeError(f"sobel needs at least 3x3, got {g.shape}")
    padded = np.pad(g.data, 1, mode="edge")
    gx, gy = _sobel_components(padded)
    squared = gx * gx + gy * gy
    radius = np.sqrt(squared + SOBEL_EPS * SOBEL_EPS)
    magnitude = squared / (radius + SOBEL_EPS)

    def backward(grad):
        d_gx = grad * gx / radius
        d_gy = grad * gy / radius
        d_padded = _correlate_transpose(d_gx, _SOBEL_X) + _correlate_transpose(d_gy, _SOBEL_Y)
        return (_fold_replicate_padding(d_padded),)

    return _apply("sobel", (g,), magnitude, backward)
