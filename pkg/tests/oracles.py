"""Independent reference computations shared by the unit and acceptance tests."""

from __future__ import annotations

import itertools

import numpy as np

from splitrec.towers import Arch, TowerParams, head_forward_backward, tower_backward, tower_forward


def rel_err(a, b) -> float:
    """Max-norm relative error ``|a-b|_inf / max(|a|_inf, |b|_inf)``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - b)) / scale)


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        out[idx] = (f(xp) - f(xm)) / (2 * h)
    return out


def user_input(params: TowerParams, x):
    return [x] if params.arch is Arch.CLSM else x


def end_to_end_loss(user: TowerParams, item: TowerParams, x, item_inputs, labels) -> float:
    u, _ = tower_forward(user, user_input(user, x))
    v, _ = tower_forward(item, item_inputs)
    sims = v @ u[0] / (np.linalg.norm(u[0]) * np.linalg.norm(v, axis=1))
    logits = sims - sims.max()
    logp = logits - np.log(np.exp(logits).sum())
    return float(-(labels @ logp) / labels.size)


def end_to_end_grads(user: TowerParams, item: TowerParams, x, item_inputs, labels):
    """Analytic gradients via the library: user tower, item tower, item embeddings."""
    u, trace_u = tower_forward(user, user_input(user, x))
    v, trace_v = tower_forward(item, item_inputs)
    _, _, grad_u, grad_items = head_forward_backward(u[0], v, labels)
    return tower_backward(user, trace_u, grad_u[None, :]), tower_backward(item, trace_v, grad_items), grad_items, v


def brute_force_auc(scores, labels) -> float:
    scores = np.asarray(scores)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    total = 0.0
    for p, n in itertools.product(pos, neg):
        total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def pairwise_auc(scores, labels) -> float:
    """Vectorised pairwise count; exact for up to ~1e7 pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels][:, None], scores[~labels][None, :]
    wins = int((pos > neg).sum()) + 0.5 * int((pos == neg).sum())
    return wins / (pos.size * neg.size)


def loss_from_embeddings(user: TowerParams, x, item_embeddings, labels) -> float:
    """Loss as a function of the cut-layer item embeddings alone."""
    u, _ = tower_forward(user, user_input(user, x))
    v = np.asarray(item_embeddings)
    sims = v @ u[0] / (np.linalg.norm(u[0]) * np.linalg.norm(v, axis=1))
    logits = sims - sims.max()
    logp = logits - np.log(np.exp(logits).sum())
    return float(-(labels @ logp) / labels.size)
