"""Two-tower scoring model: towers, cosine head, in-batch softmax loss, gradients.

A tower is either a DSSM stack of tanh dense layers or a CLSM stack (one
convolution + max-pool layer followed by dense layers). Batched DSSM inputs
are ``(n, in)`` arrays; CLSM inputs are lists of ``(length, in)`` word
sequences.

The head scores a user embedding against the ``T`` item embeddings in a
batch by cosine similarity and applies softmax cross-entropy over those
``T`` items only. :func:`backward` returns the user-tower gradient together
with the per-item gradients at the cut layer (the item embeddings), which is
everything a server holding the item tower needs to finish backpropagation
via :func:`item_backward`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError, LabelError, ShapeError
from .featurize import FeatureVector, stack_dense
from .numeric import (
    Activation,
    LayerParams,
    Rng,
    conv1d_maxpool_backward,
    conv1d_maxpool_forward,
    dense_backward,
    dense_forward,
    gaussian_init,
    log_softmax,
    tally,
)

EPS_NORM = 1e-12
DSSM_DIMS = (256, 128, 128)
CLSM_DIMS = (300, 128)


class Arch(str, Enum):
    DSSM = "dssm"
    CLSM = "clsm"


@dataclass(frozen=True)
class TowerParams:
    """Ordered layers of one tower; also used as the container for its gradients."""

    arch: Arch
    layers: tuple[LayerParams, ...]
    window: int = 3

    def __post_init__(self):
        object.__setattr__(self, "arch", Arch(self.arch))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ShapeError("tower layers", ">= 1", 0)
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError("tower layer chain", prev.out_dim, nxt.in_dim)
        if self.arch is Arch.CLSM and self.layers[0].in_dim % self.window:
            raise ShapeError("conv filter width", f"multiple of {self.window}", self.layers[0].in_dim)

    @property
    def embedding_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def input_dim(self) -> int:
        first = self.layers[0].in_dim
        return first // self.window if self.arch is Arch.CLSM else first

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    @property
    def n_weights(self) -> int:
        return sum(layer.weights.size for layer in self.layers)

    def flat(self) -> np.ndarray:
        parts = []
        for layer in self.layers:
            parts.append(layer.weights.ravel())
            parts.append(layer.bias)
        return np.concatenate(parts)

    def with_flat(self, vec: np.ndarray) -> "TowerParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ShapeError("flat tower vector", (self.n_params,), vec.shape)
        layers, pos = [], 0
        for layer in self.layers:
            w_size = layer.weights.size
            w = vec[pos : pos + w_size].reshape(layer.weights.shape).copy()
            pos += w_size
            b = vec[pos : pos + layer.out_dim].copy()
            pos += layer.out_dim
            layers.append(LayerParams(w, b, layer.activation))
        return TowerParams(self.arch, tuple(layers), self.window)

    def zeros_like(self) -> "TowerParams":
        return self.with_flat(np.zeros(self.n_params))


def init_tower(
    rng: Rng,
    arch: Arch | str,
    input_dim: int,
    dims: Sequence[int] | None = None,
    *,
    std: float = 0.1,
    window: int = 3,
) -> TowerParams:
    """Gaussian-initialise weights and biases of a DSSM or CLSM tower.

    ``dims`` lists layer widths; for CLSM the first entry is the number of
    convolution filters (the max-pool dimension).
    """
    arch = Arch(arch)
    dims = tuple(dims) if dims is not None else (DSSM_DIMS if arch is Arch.DSSM else CLSM_DIMS)
    layers = []
    fan_in = input_dim * window if arch is Arch.CLSM else input_dim
    for width in dims:
        w = gaussian_init(rng, width, fan_in, 0.0, std)
        b = gaussian_init(rng, 1, width, 0.0, std)[0]
        layers.append(LayerParams(w, b, Activation.TANH))
        fan_in = width
    return TowerParams(arch, tuple(layers), window)


# ---------------------------------------------------------------------------
# Forward / backward through a whole tower
# ---------------------------------------------------------------------------


@dataclass
class TowerTrace:
    """Activations kept from a forward pass so backward need not redo it."""

    inputs: object
    outputs: list[np.ndarray]  # per layer, before dropout
    masks: list[np.ndarray | None]


def _as_dssm_batch(params: TowerParams, inputs) -> np.ndarray:
    if isinstance(inputs, FeatureVector):
        inputs = inputs.to_dense()[None, :]
    elif isinstance(inputs, (list, tuple)) and inputs and isinstance(inputs[0], FeatureVector):
        inputs = stack_dense(inputs, inputs[0].dim)
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError("tower input", f"(n, {params.input_dim})", x.shape)
    return x


def _as_sequence(seq, dim: int) -> np.ndarray:
    if isinstance(seq, (list, tuple)) and (not seq or isinstance(seq[0], FeatureVector)):
        return stack_dense(seq, dim)
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim == 1:
        seq = seq[None, :]
    if seq.shape[0] == 0:
        return np.zeros((1, dim))
    return seq


def _as_clsm_batch(params: TowerParams, inputs) -> list[np.ndarray]:
    dim = params.input_dim
    if isinstance(inputs, np.ndarray) and inputs.ndim == 2:
        inputs = [inputs]
    elif isinstance(inputs, (list, tuple)) and inputs and isinstance(inputs[0], FeatureVector):
        inputs = [inputs]
    seqs = [_as_sequence(s, dim) for s in inputs]
    for s in seqs:
        if s.shape[1] != dim:
            raise ShapeError("conv tower input", f"(length, {dim})", s.shape)
    return seqs


def dropout_masks(params: TowerParams, n: int, rate: float, rng: Rng) -> list[np.ndarray | None]:
    """Inverted-dropout masks for every hidden layer output (none on the last)."""
    if rate <= 0:
        return [None] * len(params.layers)
    keep = 1.0 - rate
    masks: list[np.ndarray | None] = []
    for layer in params.layers[:-1]:
        masks.append((rng.random((n, layer.out_dim)) < keep) / keep)
    masks.append(None)
    return masks


def tower_forward(params: TowerParams, inputs, masks: Sequence[np.ndarray | None] | None = None):
    """Embed a batch. Returns ``(embeddings (n, k), trace)``."""
    masks = list(masks) if masks is not None else [None] * len(params.layers)
    outputs: list[np.ndarray] = []
    if params.arch is Arch.DSSM:
        data = _as_dssm_batch(params, inputs)
        h = data
        start = 0
    else:
        data = _as_clsm_batch(params, inputs)
        pooled = np.stack([conv1d_maxpool_forward(params.layers[0], s, params.window) for s in data])
        outputs.append(pooled)
        h = pooled if masks[0] is None else pooled * masks[0]
        start = 1
    for li in range(start, len(params.layers)):
        y = dense_forward(params.layers[li], h)
        outputs.append(y)
        h = y if masks[li] is None else y * masks[li]
    return h, TowerTrace(data, outputs, masks)


def tower_backward(params: TowerParams, trace: TowerTrace, upstream: np.ndarray) -> TowerParams:
    """Parameter gradients of ``sum(upstream * embeddings)``, summed over the batch."""
    upstream = np.asarray(upstream, dtype=np.float64)
    n_layers = len(params.layers)
    expected = trace.outputs[-1].shape
    if upstream.shape != expected:
        raise ShapeError("tower upstream gradient", expected, upstream.shape)
    grads: list[LayerParams | None] = [None] * n_layers
    g = upstream
    first_dense = 1 if params.arch is Arch.CLSM else 0
    for li in range(n_layers - 1, first_dense - 1, -1):
        layer = params.layers[li]
        if trace.masks[li] is not None:
            g = g * trace.masks[li]
        if li == 0:
            x = trace.inputs
        else:
            prev = trace.outputs[li - 1]
            x = prev if trace.masks[li - 1] is None else prev * trace.masks[li - 1]
        gw, gb, gx = dense_backward(layer, x, g, output=trace.outputs[li], need_input_grad=li > 0)
        grads[li] = LayerParams(gw, gb, layer.activation)
        g = gx
    if params.arch is Arch.CLSM:
        conv = params.layers[0]
        if trace.masks[0] is not None:
            g = g * trace.masks[0]
        gw = np.zeros_like(conv.weights)
        gb = np.zeros_like(conv.bias)
        for row, seq in enumerate(trace.inputs):
            w_i, b_i, _ = conv1d_maxpool_backward(conv, seq, g[row], params.window, need_input_grad=False)
            gw += w_i
            gb += b_i
        grads[0] = LayerParams(gw, gb, conv.activation)
    return TowerParams(params.arch, tuple(grads), params.window)


def user_forward(x, params: TowerParams) -> np.ndarray:
    """Embed one user's features; returns a length-``k`` vector."""
    emb, _ = tower_forward(params, x)
    return emb[0]


def item_forward(items, params: TowerParams) -> np.ndarray:
    """Embed a batch of items; returns ``(n, k)``.

    ``items`` is a dense ``(n, in)`` array or list of FeatureVectors (DSSM),
    or a list of word sequences (CLSM).
    """
    if params.arch is Arch.CLSM:
        emb, _ = tower_forward(params, list(items))
    else:
        emb, _ = tower_forward(params, items)
    return emb


# ---------------------------------------------------------------------------
# Head
# ---------------------------------------------------------------------------


def cosine_sim(u: np.ndarray, i: np.ndarray) -> float:
    """Cosine similarity with norms floored at ``EPS_NORM``."""
    u = np.asarray(u, dtype=np.float64)
    i = np.asarray(i, dtype=np.float64)
    if u.shape != i.shape:
        raise ShapeError("cosine operands", u.shape, i.shape)
    nu = max(float(np.linalg.norm(u)), EPS_NORM)
    ni = max(float(np.linalg.norm(i)), EPS_NORM)
    return float(np.clip(u @ i / (nu * ni), -1.0, 1.0))


def cosine_scores(u: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Cosine similarity of ``u`` (k,) against every row of ``items`` (n, k)."""
    u = np.asarray(u, dtype=np.float64)
    items = np.atleast_2d(np.asarray(items, dtype=np.float64))
    if items.shape[1] != u.shape[0]:
        raise ShapeError("item embeddings", f"(n, {u.shape[0]})", items.shape)
    nu = max(float(np.linalg.norm(u)), EPS_NORM)
    ni = np.maximum(np.linalg.norm(items, axis=1), EPS_NORM)
    tally(items.size * 2)
    return items @ u / (nu * ni)


@dataclass
class Batch:
    """One client's local batch: user features, requested items and labels."""

    user_features: object
    item_ids: tuple[int, ...]
    item_embeddings: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.item_ids = tuple(int(i) for i in self.item_ids)
        self.item_embeddings = np.atleast_2d(np.asarray(self.item_embeddings, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.float64)
        t = len(self.item_ids)
        if self.item_embeddings.shape[0] != t or self.labels.shape != (t,):
            raise ShapeError("batch items/labels", t, (self.item_embeddings.shape[0], self.labels.shape))


def softmax_xent(sims: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss ``-(1/T) sum r_j log softmax(sims)_j``, probabilities and d loss / d sims."""
    labels = np.asarray(labels, dtype=np.float64)
    if not np.any(labels > 0):
        raise LabelError("batch has no positive label")
    logp = log_softmax(sims)
    t = labels.size
    loss = float(-(labels @ logp) / t)
    probs = np.exp(logp)
    grad = (labels.sum() * probs - labels) / t
    return loss, probs, grad


def _cosine_parts(u: np.ndarray, items: np.ndarray):
    nu_raw = float(np.linalg.norm(u))
    ni_raw = np.linalg.norm(items, axis=1)
    nu = max(nu_raw, EPS_NORM)
    ni = np.maximum(ni_raw, EPS_NORM)
    dots = items @ u
    sims = dots / (nu * ni)
    tally(items.size * 2)
    return sims, nu, ni, nu_raw >= EPS_NORM, ni_raw >= EPS_NORM


def head_forward_backward(u: np.ndarray, items: np.ndarray, labels: np.ndarray):
    """Loss, probs and gradients w.r.t. the user embedding and each item embedding."""
    u = np.asarray(u, dtype=np.float64)
    items = np.asarray(items, dtype=np.float64)
    sims, nu, ni, u_live, i_live = _cosine_parts(u, items)
    loss, probs, g_s = softmax_xent(sims, labels)
    # d sim_j / d u = i_j/(|u||i_j|) - sim_j u/|u|^2 (norm term dropped below the floor)
    coeff = g_s / (nu * ni)
    grad_u = coeff @ items
    if u_live:
        grad_u -= (g_s @ sims) * u / (nu * nu)
    grad_items = np.outer(coeff, u)
    grad_items -= (g_s * sims * i_live / (ni * ni))[:, None] * items
    tally(items.size * 3)
    return loss, probs, grad_u, grad_items


def batch_loss(batch: Batch, u: np.ndarray) -> tuple[float, np.ndarray]:
    """In-batch softmax cross-entropy of ``batch`` scored against user embedding ``u``."""
    sims, *_ = _cosine_parts(np.asarray(u, dtype=np.float64), batch.item_embeddings)
    loss, probs, _ = softmax_xent(sims, batch.labels)
    return loss, probs


def backward(
    batch: Batch,
    user_params: TowerParams,
    x=None,
    masks: Sequence[np.ndarray | None] | None = None,
) -> tuple[TowerParams, np.ndarray, float]:
    """Client-side backward pass.

    Returns:
        ``(grad_user, cut_grads, loss)`` where ``cut_grads[j]`` is
        d loss / d item_embedding_j for the j-th requested item.
    """
    x = batch.user_features if x is None else x
    emb, trace = tower_forward(user_params, x, masks)
    loss, _, grad_u, grad_items = head_forward_backward(emb[0], batch.item_embeddings, batch.labels)
    grad_user = tower_backward(user_params, trace, grad_u[None, :])
    return grad_user, grad_items, loss


# ---------------------------------------------------------------------------
# Server side of the cut layer
# ---------------------------------------------------------------------------


@dataclass
class ItemForwardCache:
    """Item-tower activations computed for one round's requested items."""

    item_ids: np.ndarray
    embeddings: np.ndarray
    trace: TowerTrace
    position: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.item_ids = np.asarray(self.item_ids, dtype=np.int64)
        self.position = {int(i): p for p, i in enumerate(self.item_ids)}

    def lookup(self, ids: Sequence[int]) -> np.ndarray:
        missing = [int(i) for i in ids if int(i) not in self.position]
        if missing:
            raise DataError(f"item ids not served this round: {missing}")
        return self.embeddings[[self.position[int(i)] for i in ids]]


def item_forward_cached(params: TowerParams, item_ids: Sequence[int], inputs, masks=None) -> ItemForwardCache:
    emb, trace = tower_forward(params, inputs, masks)
    return ItemForwardCache(np.asarray(item_ids), emb, trace)


def item_backward(cut_grads, cache: ItemForwardCache, item_params: TowerParams) -> TowerParams:
    """Chain cut-layer gradients through the cached item-tower forward pass.

    ``cut_grads`` is either a mapping ``item_id -> k-vector`` or a pair
    ``(item_ids, (n, k) array)``. Items served but absent from ``cut_grads``
    contribute nothing.
    """
    if isinstance(cut_grads, Mapping):
        ids = list(cut_grads.keys())
        rows = np.array([cut_grads[i] for i in ids], dtype=np.float64).reshape(len(ids), -1)
    else:
        ids, rows = cut_grads
        rows = np.asarray(rows, dtype=np.float64)
    missing = [int(i) for i in ids if int(i) not in cache.position]
    if missing:
        raise DataError(f"cut gradient for unknown item ids: {missing}")
    upstream = np.zeros_like(cache.embeddings)
    for item, row in zip(ids, rows):
        upstream[cache.position[int(item)]] += row
    return tower_backward(item_params, cache.trace, upstream)


# ---------------------------------------------------------------------------
# Serialization: header + little-endian float64 stream
# ---------------------------------------------------------------------------

_MAGIC = b"TWR1"
_HEAD = struct.Struct("<4sBBH")
_LAYER = struct.Struct("<IIB3x")
_ACT_CODE = {Activation.TANH: 0, Activation.IDENTITY: 1}
_ARCH_CODE = {Arch.DSSM: 0, Arch.CLSM: 1}


def header_bytes(params: TowerParams) -> int:
    return _HEAD.size + _LAYER.size * len(params.layers)


def serialize_tower(params: TowerParams) -> bytes:
    """Self-describing header (arch, window, layer dims) followed by the flat floats."""
    head = _HEAD.pack(_MAGIC, _ARCH_CODE[params.arch], params.window, len(params.layers))
    dims = b"".join(_LAYER.pack(l.out_dim, l.in_dim, _ACT_CODE[l.activation]) for l in params.layers)
    return head + dims + params.flat().astype("<f8").tobytes()


def deserialize_tower(blob: bytes) -> TowerParams:
    magic, arch_code, window, n_layers = _HEAD.unpack_from(blob, 0)
    if magic != _MAGIC:
        raise DataError("not a serialized tower")
    arch = {v: k for k, v in _ARCH_CODE.items()}[arch_code]
    acts = {v: k for k, v in _ACT_CODE.items()}
    pos = _HEAD.size
    shapes = []
    for _ in range(n_layers):
        out_dim, in_dim, act = _LAYER.unpack_from(blob, pos)
        shapes.append((out_dim, in_dim, acts[act]))
        pos += _LAYER.size
    data = np.frombuffer(blob, dtype="<f8", offset=pos).astype(np.float64)
    layers, off = [], 0
    for out_dim, in_dim, act in shapes:
        w = data[off : off + out_dim * in_dim].reshape(out_dim, in_dim)
        off += out_dim * in_dim
        b = data[off : off + out_dim]
        off += out_dim
        layers.append(LayerParams(w.copy(), b.copy(), act))
    if off != data.size:
        raise DataError("serialized tower has trailing data")
    return TowerParams(arch, tuple(layers), window)
