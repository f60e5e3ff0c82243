"""Dense math substrate: layers, activations, RNG and multiply-add counting.

Arrays are plain ``numpy.ndarray`` in float64. Layer functions accept either a
single input vector of shape ``(in,)`` or a batch of shape ``(n, in)`` and
return outputs of the matching rank.

Every matmul performed here reports its multiply-add count to the active
:class:`OpCounter` (see :func:`count_ops`), which is how the accounting layer
measures per-entity compute without timing anything.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Sequence

import numpy as np

from .errors import ShapeError

__all__ = [
    "Activation",
    "LayerParams",
    "OpCounter",
    "Rng",
    "conv1d_maxpool_backward",
    "conv1d_maxpool_forward",
    "count_ops",
    "dense_backward",
    "dense_forward",
    "gaussian_init",
    "log_softmax",
    "softmax",
    "tally",
]


# ---------------------------------------------------------------------------
# Op counting
# ---------------------------------------------------------------------------


class OpCounter:
    """Accumulates scalar multiply-adds performed inside a :func:`count_ops` block."""

    def __init__(self) -> None:
        self.ops = 0

    def add(self, n: int) -> None:
        self.ops += int(n)


_active_counters: contextvars.ContextVar[tuple[OpCounter, ...]] = contextvars.ContextVar(
    "_active_counters", default=()
)


@contextlib.contextmanager
def count_ops() -> Iterator[OpCounter]:
    """Count multiply-adds issued by this module while the block runs.

    Blocks nest; an inner block's ops are also credited to the outer ones.
    """
    counter = OpCounter()
    token = _active_counters.set(_active_counters.get() + (counter,))
    try:
        yield counter
    finally:
        _active_counters.reset(token)


def tally(n: int) -> None:
    """Credit ``n`` multiply-adds to every active counter."""
    for counter in _active_counters.get():
        counter.add(n)


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------


class Rng:
    """Counter-based (Philox) generator addressed by ``seed`` plus a key path.

    ``child(*key)`` derives an independent stream without consuming anything
    from the parent, so a simulated client's draws depend only on
    ``(seed, key)`` and never on which other clients ran first.
    """

    def __init__(self, seed: int, key: Sequence[int] = ()):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.Philox(seq))

    def child(self, *key: int) -> "Rng":
        return Rng(self.seed, self.key + tuple(key))

    def normal(self, mean: float, std: float, size) -> np.ndarray:
        return self.generator.normal(mean, std, size)

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def choice(self, a, size: int, replace: bool = False) -> np.ndarray:
        return self.generator.choice(a, size=size, replace=replace)

    def permutation(self, x) -> np.ndarray:
        return self.generator.permutation(x)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key})"


def gaussian_init(rng: Rng, rows: int, cols: int, mean: float = 0.0, std: float = 0.1) -> np.ndarray:
    """Draw a ``(rows, cols)`` matrix from N(mean, std^2)."""
    if rows <= 0 or cols <= 0:
        raise ShapeError("gaussian_init dims", "positive", (rows, cols))
    if std == 0:
        return np.full((rows, cols), float(mean))
    return rng.normal(mean, std, (rows, cols))


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Activation(str, Enum):
    TANH = "tanh"
    IDENTITY = "identity"

    def apply(self, z: np.ndarray) -> np.ndarray:
        return np.tanh(z) if self is Activation.TANH else z

    def grad_from_output(self, y: np.ndarray) -> np.ndarray:
        """Derivative expressed through the activation's output."""
        if self is Activation.TANH:
            return 1.0 - y * y
        return np.ones_like(y)


@dataclass(frozen=True)
class LayerParams:
    """Weights ``(out, in)``, bias ``(out,)`` and an activation.

    The same container serves dense layers and convolution layers; for the
    latter ``in`` is ``window * channels``.
    """

    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.TANH

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2:
            raise ShapeError("layer weights rank", 2, w.ndim)
        if b.shape != (w.shape[0],):
            raise ShapeError("layer bias length", w.shape[0], b.shape)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size


def _check_input(layer: LayerParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != layer.in_dim:
        raise ShapeError("layer input", f"(..., {layer.in_dim})", x.shape)
    return x


def dense_forward(layer: LayerParams, x: np.ndarray) -> np.ndarray:
    """``activation(W @ x + b)`` for one vector or a batch of row vectors."""
    x = _check_input(layer, x)
    n = 1 if x.ndim == 1 else x.shape[0]
    tally(n * layer.weights.size)
    return layer.activation.apply(x @ layer.weights.T + layer.bias)


def dense_backward(
    layer: LayerParams,
    x: np.ndarray,
    upstream: np.ndarray,
    *,
    output: np.ndarray | None = None,
    need_input_grad: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Gradients of ``upstream . dense_forward(layer, x)``.

    Batched inputs sum their weight and bias gradients over the batch.
    Pass ``output`` to skip recomputing the forward pass; set
    ``need_input_grad=False`` for first layers whose input is data.

    Returns:
        ``(grad_weights, grad_bias, grad_input)``; ``grad_input`` is None
        when not requested.
    """
    x = _check_input(layer, x)
    upstream = np.asarray(upstream, dtype=np.float64)
    expected = x.shape[:-1] + (layer.out_dim,)
    if upstream.shape != expected:
        raise ShapeError("upstream gradient", expected, upstream.shape)
    if output is None:
        # recompute is not credited as model work
        output =layer.activation.apply(x @ layer.weights.T + layer.bias)
    delta = upstream * layer.activation.grad_from_output(output)
    n = 1 if x.ndim == 1 else x.shape[0]
    if x.ndim == 1:
        grad_w = np.outer(delta, x)
        grad_b = delta.copy()
    else:
        grad_w = delta.T @ x
        grad_b = delta.sum(axis=0)
    tally(n * layer.weights.size)
    grad_x = None
    if need_input_grad:
        grad_x = delta @ layer.weights
        tally(n * layer.weights.size)
    return grad_w, grad_b, grad_x


def _patches(seq: np.ndarray, window: int) -> np.ndarray:
    """Stack each ``window``-long run of rows into one row (zero right-padding)."""
    length, channels = seq.shape
    if length < window:
        seq = np.vstack([seq, np.zeros((window - length, channels))])
        length = window
    positions = length - window + 1
    idx = np.arange(positions)[:, None] + np.arange(window)[None, :]
    return seq[idx].reshape(positions, window * channels)


def _check_seq(layer: LayerParams, seq: np.ndarray, window: int) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise ShapeError("conv input", "(length>=1, channels)", seq.shape)
    if window <= 0 or layer.in_dim != window * seq.shape[1]:
        raise ShapeError("conv filter width", window * seq.shape[1], layer.in_dim)
    return seq


def conv1d_maxpool_forward(layer: LayerParams, seq: np.ndarray, window: int = 3) -> np.ndarray:
    """Convolve ``seq`` (length, channels) with ``layer`` filters, then max-pool.

    Each output dimension is the maximum over positions of
    ``activation(W @ patch + b)``. Sequences shorter than ``window`` are
    padded with zero rows on the right.
    """
    seq = _check_seq(layer, seq, window)
    patches = _patches(seq, window)
    tally(patches.shape[0] * layer.weights.size)
    act = layer.activation.apply(patches @ layer.weights.T + layer.bias)
    return act.max(axis=0)


def conv1d_maxpool_backward(
    layer: LayerParams,
    seq: np.ndarray,
    upstream: np.ndarray,
    window: int = 3,
    *,
    need_input_grad: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Gradients of ``upstream . conv1d_maxpool_forward(layer, seq, window)``.

    The gradient for each pooled dimension flows only to its argmax position;
    ties go to the lowest position index.

    Returns:
        ``(grad_filters, grad_bias, grad_seq)`` where ``grad_seq`` has the
        shape of the unpadded ``seq`` (None when not requested).
    """
    seq = _check_seq(layer, seq, window)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (layer.out_dim,):
        raise ShapeError("upstream gradient", (layer.out_dim,), upstream.shape)
    patches = _patches(seq, window)
    act = layer.activation.apply(patches @ layer.weights.T + layer.bias)
    winners = act.argmax(axis=0)  # first occurrence on ties
    cols = np.arange(layer.out_dim)
    delta = np.zeros_like(act)
    delta[winners, cols] = upstream * layer.activation.grad_from_output(act[winners, cols])
    grad_w = delta.T @ patches
    grad_b = delta.sum(axis=0)
    tally(patches.shape[0] * layer.weights.size)
    if not need_input_grad:
        return grad_w, grad_b, None
    grad_patches = delta @ layer.weights
    tally(patches.shape[0] * layer.weights.size)
    length, channels = seq.shape
    padded = np.zeros((max(length, window), channels))
    positions = grad_patches.shape[0]
    grad_patches = grad_patches.reshape(positions, window, channels)
    for offset in range(window):
        padded[offset : offset + positions] += grad_patches[:, offset, :]
    return grad_w, grad_b, padded[:length]


# ---------------------------------------------------------------------------
# Softmax
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax of a non-empty vector."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ShapeError("softmax input", "non-empty vector", z.shape)
    e = np.exp(z - z.max())
    return e / e.sum()


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ShapeError("log_softmax input", "non-empty vector", z.shape)
    shifted = z - z.max()
    return shifted - np.log(np.exp(shifted).sum())
