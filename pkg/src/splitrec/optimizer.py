"""Server-side FedAdam with a stepped learning-rate decay, plus plain Adam.

FedAdam (no bias correction)::

    m <- b1 * m + (1 - b1) * g
    v <- b2 * v + (1 - b2) * g**2
    theta <- theta - lr_t * m / (sqrt(v) + tau)

with ``lr_t = lr * (1 - decay) ** (t // decay_every)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import NonFiniteGradient, ShapeError
from .towers import TowerParams, deserialize_tower, serialize_tower


@dataclass(frozen=True)
class FedAdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-8
    decay: float = 0.01
    decay_every: int = 10

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.lr < 0 or self.tau < 0 or not (0 <= self.decay < 1) or self.decay_every < 1:
            raise ValueError("invalid optimizer hyperparameters")


def lr_at(round_index: int, config: FedAdamConfig = FedAdamConfig()) -> float:
    """Learning rate for a round: reduced by ``decay`` (fractionally) every ``decay_every`` rounds."""
    if round_index < 0:
        raise ValueError("round must be non-negative")
    return config.lr * (1.0 - config.decay) ** (round_index // config.decay_every)


@dataclass(frozen=True)
class FedAdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    config: FedAdamConfig = FedAdamConfig()

    @classmethod
    def zeros(cls, n: int, config: FedAdamConfig = FedAdamConfig()) -> "FedAdamState":
        return cls(np.zeros(n), np.zeros(n), 0, config)


def _flat(x) -> np.ndarray:
    return x.flat() if isinstance(x, TowerParams) else np.asarray(x, dtype=np.float64).ravel()


def fedadam_step(state: FedAdamState, params, avg_grad):
    """Apply one FedAdam update; returns ``(new_params, new_state)``.

    ``params`` may be a :class:`TowerParams` (returned as one) or a flat array.
    Neither input is modified.
    """
    theta = _flat(params)
    g = _flat(avg_grad)
    if g.shape != theta.shape or state.m.shape != theta.shape:
        raise ShapeError("fedadam shapes", theta.shape, (g.shape, state.m.shape))
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient(f"non-finite aggregated gradient at step {state.t}")
    c = state.config
    m = c.beta1 * state.m + (1.0 - c.beta1) * g
    v = c.beta2 * state.v + (1.0 - c.beta2) * g * g
    step = lr_at(state.t, c) * m / (np.sqrt(v) + c.tau)
    new_theta = theta - step
    new_state = FedAdamState(m, v, state.t + 1, c)
    if isinstance(params, TowerParams):
        return params.with_flat(new_theta), new_state
    return new_theta, new_state


@dataclass(frozen=True)
class AdamState:
    """Bias-corrected Adam for the single-party (centralised) baseline."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, **kw)


def adam_step(state: AdamState, params, grad):
    theta = _flat(params)
    g = _flat(grad)
    if g.shape != theta.shape:
        raise ShapeError("adam shapes", theta.shape, g.shape)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient(f"non-finite gradient at step {state.t}")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * g
    v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new_theta = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = replace(state, m=m, v=v, t=t)
    if isinstance(params, TowerParams):
        return params.with_flat(new_theta), new_state
    return new_theta, new_state


# ---------------------------------------------------------------------------
# Checkpoints: every array goes through the tower float-stream format
# ---------------------------------------------------------------------------


def save_checkpoint(directory: str | Path, towers: dict[str, TowerParams], states: dict[str, FedAdamState], meta: dict) -> Path:
    """Write ``<name>.twr`` for each tower and ``<name>.m.twr`` / ``.v.twr`` for moments."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, params in towers.items():
        (directory / f"{name}.twr").write_bytes(serialize_tower(params))
        if name in states:
            st = states[name]
            (directory / f"{name}.m.twr").write_bytes(serialize_tower(params.with_flat(st.m)))
            (directory / f"{name}.v.twr").write_bytes(serialize_tower(params.with_flat(st.v)))
    optim = {name: {"t": st.t, **asdict(st.config)} for name, st in states.items()}
    (directory / "state.json").write_text(json.dumps({"meta": meta, "optimizer": optim}, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory: str | Path) -> tuple[dict[str, TowerParams], dict[str, FedAdamState], dict]:
    directory = Path(directory)
    info = json.loads((directory / "state.json").read_text())
    towers, states = {}, {}
    for path in sorted(directory.glob("*.twr")):
        if path.name.count(".") == 1:
            towers[path.stem] = deserialize_tower(path.read_bytes())
    for name, opt in info["optimizer"].items():
        opt = dict(opt)
        t = opt.pop("t")
        m = deserialize_tower((directory / f"{name}.m.twr").read_bytes()).flat()
        v = deserialize_tower((directory / f"{name}.v.twr").read_bytes()).flat()
        states[name] = FedAdamState(m, v, t, FedAdamConfig(**opt))
    return towers, states, info["meta"]

