"""Byte and multiply-add ledger per entity and round, and analytic cost predictors.

Transfers are recorded once at the sender (``SENT``) and once at the
receiver (``RECEIVED``), split into named channels (``user_tower``,
``cut_grad``, ...). Header/id-list overhead is recorded on the ``framing``
channel so float-payload figures can be compared to formulas exactly.
"""

from __future__ import annotations

import csv
import json
import threading
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .towers import Arch, TowerParams

REC_SERVER = "rec_server"
AGG_SERVER = "agg_server"
FRAMING = "framing"
FLOAT_BYTES = 8


def client_entity(cid: int) -> str:
    return f"client:{cid}"


def is_client(entity: str) -> bool:
    return entity.startswith("client:")


class Direction(str, Enum):
    SENT = "sent"
    RECEIVED = "received"
    COMPUTE = "compute"


class Phase(str, Enum):
    TRAINING = "training"
    INFERENCE = "inference"


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    entity: str
    direction: Direction
    amount: int
    phase: Phase
    channel: str = ""


class CostLedger:
    """Append-only record of bytes moved and multiply-adds spent."""

    def __init__(self) -> None:
        self.entries: list[LedgerEntry] = []
        self.wall_ms: list[tuple[int, str, Phase, float]] = []
        self._lock = threading.Lock()

    def _append(self, entry: LedgerEntry) -> None:
        with self._lock:
            self.entries.append(entry)

    def transfer(
        self,
        round: int,
        src: str,
        dst: str,
        sections: Mapping[str, int],
        phase: Phase = Phase.TRAINING,
    ) -> int:
        """Record one message; ``sections`` maps channel -> bytes. Returns total bytes."""
        total = 0
        for channel, nbytes in sections.items():
            if nbytes == 0:
                continue
            self._append(LedgerEntry(round, src, Direction.SENT, int(nbytes), Phase(phase), channel))
            self._append(LedgerEntry(round, dst, Direction.RECEIVED, int(nbytes), Phase(phase), channel))
            total += int(nbytes)
        return total

    def compute(self, round: int, entity: str, ops: int, phase: Phase = Phase.TRAINING, channel: str = "") -> None:
        self._append(LedgerEntry(round, entity, Direction.COMPUTE, int(ops), Phase(phase), channel))

    def timing(self, round: int, entity: str, ms: float, phase: Phase = Phase.TRAINING) -> None:
        with self._lock:
            self.wall_ms.append((round, entity, Phase(phase), float(ms)))

    def snapshot(self) -> tuple[LedgerEntry, ...]:
        with self._lock:
            return tuple(self.entries)

    def select(
        self,
        *,
        round: int | None = None,
        entity: str | Sequence[str] | None = None,
        direction: Direction | Sequence[Direction] | None = None,
        phase: Phase | None = None,
        channel: str | Iterable[str] | None = None,
        exclude_channel: Iterable[str] = (),
    ) -> list[LedgerEntry]:
        """Entries matching every given filter. ``entity="client"`` matches all clients."""

        def _set(x):
            if x is None:
                return None
            return {x} if isinstance(x, (str, Direction, Phase)) else set(x)

        entities = _set(entity)
        directions = _set(direction)
        channels = _set(channel)
        excluded = set(exclude_channel)
        out = []
        for e in self.snapshot():
            if round is not None and e.round != round:
                continue
            if entities is not None and e.entity not in entities and not ("client" in entities and is_client(e.entity)):
                continue
            if directions is not None and e.direction not in directions:
                continue
            if phase is not None and e.phase is not Phase(phase):
                continue
            if channels is not None and e.channel not in channels:
                continue
            if e.channel in excluded:
                continue
            out.append(e)
        return out

    def total(self, **filters) -> int:
        return sum(e.amount for e in self.select(**filters))

    def bytes_by_entity(self, round: int | None = None, phase: Phase | None = None) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = defaultdict(lambda: {"sent": 0, "received": 0})
        for e in self.select(round=round, phase=phase, direction=(Direction.SENT, Direction.RECEIVED)):
            out[e.entity][e.direction.value] += e.amount
        return dict(out)

    def ops_by_entity(self, round: int | None = None, phase: Phase | None = None) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for e in self.select(round=round, phase=phase, direction=Direction.COMPUTE):
            out[e.entity] += e.amount
        return dict(out)

    def conserved(self, round: int | None = None) -> bool:
        """Bytes sent equal bytes received (per round when given)."""
        return self.total(round=round, direction=Direction.SENT) == self.total(round=round, direction=Direction.RECEIVED)

    def client_rounds(self, phase: Phase = Phase.TRAINING) -> int:
        return len({(e.round, e.entity) for e in self.select(entity="client", phase=phase)})

    def to_csv(self, path: str | Path) -> None:
        """One row per (round, entity, direction, phase) with amounts summed over channels."""
        sums: dict[tuple, int] = defaultdict(int)
        for e in self.snapshot():
            sums[(e.round, e.entity, e.direction.value, e.phase.value)] += e.amount
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["round", "entity", "direction", "phase", "amount"])
            for key in sorted(sums):
                writer.writerow([*key, sums[key]])


# ---------------------------------------------------------------------------
# Predictors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TowerDims:
    """Architecture description sufficient for cost formulas."""

    arch: Arch
    input_dim: int
    widths: tuple[int, ...]
    window: int = 3

    @classmethod
    def from_params(cls, params: TowerParams) -> "TowerDims":
        return cls(params.arch, params.input_dim, tuple(l.out_dim for l in params.layers), params.window)

    @property
    def embedding_dim(self) -> int:
        return self.widths[-1]

    def layer_shapes(self) -> list[tuple[int, int]]:
        fan_in = self.input_dim * (self.window if self.arch is Arch.CLSM else 1)
        shapes = []
        for w in self.widths:
            shapes.append((w, fan_in))
            fan_in = w
        return shapes

    @property
    def n_weights(self) -> int:
        return sum(o * i for o, i in self.layer_shapes())

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes())

    def forward_macs(self, seq_len: int = 1) -> int:
        """Multiply-adds for one forward pass (``seq_len`` words for a conv tower)."""
        shapes = self.layer_shapes()
        if self.arch is Arch.CLSM:
            positions = max(seq_len, self.window) - self.window + 1
            first = positions * shapes[0][0] * shapes[0][1]
            return first + sum(o * i for o, i in shapes[1:])
        return sum(o * i for o, i in shapes)


@dataclass(frozen=True)
class Prediction:
    split: float
    naive: float

    @property
    def ratio(self) -> float:
        return self.naive / self.split if self.split else float("inf")


def dssm_compute_formula(x_dim: int, v_dim: int, widths: Sequence[int], T: int) -> Prediction:
    """Per-client, per-round forward cost of naive vs split DSSM training.

    naive: (|x| + |v| T) C0 + sum_{l>=2} C_{l-1} C_l (1 + T)
    split: |x| C0 + sum_{l>=2} C_{l-1} C_l
    """
    upper = sum(a * b for a, b in zip(widths, widths[1:]))
    naive = (x_dim + v_dim * T) * widths[0] + upper * (1 + T)
    split = x_dim * widths[0] + upper
    return Prediction(float(split), float(naive))


def predict_train_compute(user: TowerDims, item: TowerDims, T: int, seq_len: int = 1) -> Prediction:
    """Client multiply-adds per round: split runs only the user tower, naive also runs ``T`` item passes."""
    per_user = user.forward_macs(seq_len)
    return Prediction(float(per_user), float(per_user + T * item.forward_macs(seq_len)))


def predict_train_comm(user: TowerDims, item: TowerDims, *, include_bias: bool = False) -> Prediction:
    """Bytes per client per round for model download plus gradient upload.

    split: 2 x |user tower|; naive: 2 x (|user tower| + |item tower|), 8 bytes per value.
    """
    size = (lambda d: d.n_params) if include_bias else (lambda d: d.n_weights)
    return Prediction(
        float(2 * FLOAT_BYTES * size(user)),
        float(2 * FLOAT_BYTES * (size(user) + size(item))),
    )


def predict_infer_comm(catalog_size: int, item_feature_bytes, k: int) -> Prediction:
    """Split clients download ``k``-float embeddings; naive clients download raw item data.

    ``item_feature_bytes`` is bytes per item, or an array of per-item sizes.
    """
    raw = np.asarray(item_feature_bytes)
    naive = float(raw.sum()) if raw.ndim else float(catalog_size * raw)
    return Prediction(float(catalog_size * k * FLOAT_BYTES), naive)


def predict_round_payload(
    user: TowerDims,
    item: TowerDims,
    T: int,
    cut_slots: int,
    raw_request_bytes: int,
) -> dict[str, dict[str, int]]:
    """Exact float-payload bytes one client moves in one training round, per channel.

    ``cut_slots`` is the number of item rows in the shared cut-layer block.
    Ring channels count the share sent to the successor plus the one
    received from the predecessor.
    """
    k = item.embedding_dim
    p_u, p_v = user.n_params, item.n_params
    cut = cut_slots * (k + 1)
    split = {
        "request": 8 * T,
        "user_tower": FLOAT_BYTES * p_u,
        "item_embeddings": FLOAT_BYTES * T * k,
        "user_grad": FLOAT_BYTES * p_u,
        "cut_grad": FLOAT_BYTES * cut,
        "loss": FLOAT_BYTES,
        "ring": 2 * FLOAT_BYTES * (p_u + cut + 1),
    }
    naive = {
        "request": 8 * T,
        "user_tower": FLOAT_BYTES * p_u,
        "item_tower": FLOAT_BYTES * p_v,
        "raw_items": int(raw_request_bytes),
        "user_grad": FLOAT_BYTES * p_u,
        "item_grad": FLOAT_BYTES * p_v,
        "loss": FLOAT_BYTES,
        "ring": 2 * FLOAT_BYTES * (p_u + p_v + 1),
    }
    return {"split": split, "naive": naive}


# Channels that the download-plus-upload formula covers.
MODEL_CHANNELS = ("user_tower", "item_tower", "user_grad", "item_grad")


# ---------------------------------------------------------------------------
# Reconciliation
# ---------------------------------------------------------------------------


def improvement(factor: float) -> str:
    """Render a ratio the way the comparison table does, e.g. ``18×``."""
    if not np.isfinite(factor):
        return "inf×"
    return f"{factor:.0f}×" if factor >= 1.5 else f"{factor:.1f}×"


def client_costs(ledger: CostLedger) -> dict[str, float]:
    """Per-client averages: training per client-round, inference per inferring client."""
    out: dict[str, float] = {}
    io = (Direction.SENT, Direction.RECEIVED)
    for phase, tag in ((Phase.TRAINING, "train"), (Phase.INFERENCE, "infer")):
        n = ledger.client_rounds(phase)
        if not n:
            continue
        out[f"{tag}_bytes"] = ledger.total(entity="client", phase=phase, direction=io) / n
        out[f"{tag}_payload_bytes"] = ledger.total(entity="client", phase=phase, direction=io, exclude_channel=(FRAMING,)) / n
        out[f"{tag}_ops"] = ledger.total(entity="client", phase=phase, direction=Direction.COMPUTE) / n
        walls = [ms for (_, ent, ph, ms) in ledger.wall_ms if is_client(ent) and ph is phase]
        out[f"{tag}_ms"] = float(sum(walls) / n) if walls else 0.0
    return out


def reconcile(
    split: CostLedger,
    naive: CostLedger,
    predictions: Mapping[str, Prediction] | None = None,
) -> dict:
    """Comparison of naive and split clients laid out like an efficiency table.

    Time rows are in multiply-adds (with wall milliseconds alongside);
    communication rows are in megabytes. ``predictions`` maps a measured
    key (``train_payload_bytes``, ``infer_payload_bytes``, ``train_ops``...)
    to its analytic prediction; the report lists measured/predicted ratios.
    """
    s, n = client_costs(split), client_costs(naive)
    missing = sorted(
        {f"{mode}:{key}" for mode, costs in (("split", s), ("naive", n)) for key in ("train_bytes", "infer_bytes") if key not in costs}
    )

    def get(costs, key):
        return costs.get(key, 0.0)

    def row(label, key, scale=1.0):
        return {"row": label, "naive": get(n, key) / scale, "split": get(s, key) / scale}

    mb = 1024.0 * 1024.0
    total_time_n = get(n, "train_ops") + get(n, "infer_ops")
    total_time_s = get(s, "train_ops") + get(s, "infer_ops")
    total_comm_n = get(n, "train_bytes") + get(n, "infer_bytes")
    total_comm_s = get(s, "train_bytes") + get(s, "infer_bytes")
    time_factor = total_time_n / total_time_s if total_time_s else float("inf")
    comm_factor = total_comm_n / total_comm_s if total_comm_s else float("inf")
    rows = [
        row("Device Training", "train_ops"),
        row("Inferring Time", "infer_ops"),
        {"row": "Total Time", "naive": total_time_n, "split": total_time_s},
        {"row": "<Improvement>", "value": improvement(time_factor), "factor": time_factor},
        row("Training Comm.", "train_bytes", mb),
        row("Inferring Comm.", "infer_bytes", mb),
        {"row": "Total Comm.", "naive": total_comm_n / mb, "split": total_comm_s / mb},
        {"row": "<Improvement>", "value": improvement(comm_factor), "factor": comm_factor},
    ]
    checks = {}
    for key, pred in (predictions or {}).items():
        checks[key] = {
            "split": get(s, key) / pred.split if pred.split else None,
            "naive": get(n, key) / pred.naive if pred.naive else None,
        }
    return {
        "units": {"time": "multiply-adds", "comm": "MB"},
        "rows": rows,
        "wall_ms": {"naive": {k: v for k, v in n.items() if k.endswith("_ms")}, "split": {k: v for k, v in s.items() if k.endswith("_ms")}},
        "measured_over_predicted": checks,
        "missing": missing,
    }


def format_cost_table(report: dict) -> str:
    lines = [f"{'':<18}{'naive':>16}{'split':>16}", "-" * 50]
    for r in report["rows"]:
        if "value" in r:
            lines.append(f"{r['row']:<18}{r['value']:>32}")
        else:
            lines.append(f"{r['row']:<18}{r['naive']:>16.4g}{r['split']:>16.4g}")
    return "\n".join(lines)


def write_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True, default=str))
