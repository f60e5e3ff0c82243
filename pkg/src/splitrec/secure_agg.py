"""Additive two-share masking passed around a ring of clients.

Each client splits its payload ``x`` into ``(r, x - r)`` with ``r`` uniform in
``[-bound, bound]``, keeps ``r`` and forwards ``x - r`` to its successor on the
ring. What it uploads is ``r_k + (x_{k-1} - r_{k-1})``. Summed over the ring
the masks telescope away, so the aggregation server recovers the exact mean
without ever holding an individual client's payload.

Arithmetic is over float64, not a finite field: reconstruction error is of
order ``K * bound * 2**-53`` in absolute terms.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, PrivacyWarning, ShapeError
from .numeric import Rng, tally

DEFAULT_MASK_BOUND = 1e3


@dataclass(frozen=True)
class GradPayload:
    """A client's plaintext gradient vector and loss.

    ``sections`` names consecutive slices of ``grad`` (e.g. user-tower
    gradient, cut-layer block, presence mask) so byte accounting can tell
    them apart; ``item_ids`` lists the item rows of the cut-layer block.
    """

    grad: np.ndarray
    loss: float
    item_ids: tuple[int, ...] = ()
    sections: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        g = np.asarray(self.grad, dtype=np.float64).ravel()
        object.__setattr__(self, "grad", g)
        object.__setattr__(self, "loss", float(self.loss))
        ids = tuple(int(i) for i in self.item_ids)
        if list(ids) != sorted(ids):
            raise ValueError("payload item ids must be sorted")
        object.__setattr__(self, "item_ids", ids)
        sections = tuple((str(n), int(s)) for n, s in self.sections) or (("grad", g.size),)
        if sum(s for _, s in sections) != g.size:
            raise ShapeError("payload sections", g.size, sum(s for _, s in sections))
        object.__setattr__(self, "sections", sections)
        if not (np.all(np.isfinite(g)) and np.isfinite(self.loss)):
            raise ValueError("payload must be finite")

    @property
    def size(self) -> int:
        return self.grad.size


@dataclass(frozen=True)
class GradShare:
    """One additive share of a payload. ``origin`` is simulation bookkeeping only."""

    grad: np.ndarray
    loss: float
    round: int = 0
    origin: int = 0
    item_ids: tuple[int, ...] = ()
    sections: tuple[tuple[str, int], ...] = ()


@dataclass(frozen=True)
class MixedPayload:
    """Own share plus the predecessor's forwarded share; what the aggregator sees."""

    grad: np.ndarray
    loss: float
    round: int = 0
    origin: int = 0
    item_ids: tuple[int, ...] = ()
    sections: tuple[tuple[str, int], ...] = field(default=())


def split_shares(
    payload: GradPayload,
    rng: Rng,
    bound: float = DEFAULT_MASK_BOUND,
    *,
    round: int = 0,
    origin: int = 0,
) -> tuple[GradShare, GradShare]:
    """Split ``payload`` into ``(r, payload - r)`` with ``r ~ U[-bound, bound]``.

    ``bound=0`` gives the degenerate split ``(payload, 0)``.
    """
    n = payload.size
    if bound > 0:
        mask = rng.uniform(-bound, bound, n)
        mask_loss = float(rng.uniform(-bound, bound, 1)[0])
    else:
        mask = np.zeros(n)
        mask_loss = 0.0
    tally(n + 1)
    # share1 carries the mask; with bound=0 keep the payload in share1 exactly
    if bound > 0:
        s1_grad, s1_loss = mask, mask_loss
        s2_grad, s2_loss = payload.grad - mask, payload.loss - mask_loss
    else:
        s1_grad, s1_loss = payload.grad.copy(), payload.loss
        s2_grad, s2_loss = np.zeros(n), 0.0
    meta = dict(round=round, origin=origin, item_ids=payload.item_ids, sections=payload.sections)
    return GradShare(s1_grad, s1_loss, **meta), GradShare(s2_grad, s2_loss, **meta)


def ring_pass(clients: Sequence[int], shares2: Sequence[GradShare]) -> dict[int, GradShare]:
    """Deliver each client's second share to its successor on the ring.

    Client at position ``k`` receives the share of position ``k - 1``; the
    first client receives the last one's. Returns ``receiver -> share``.
    """
    if len(clients) != len(shares2):
        raise ShapeError("ring shares", len(clients), len(shares2))
    if not clients:
        raise ValueError("ring needs at least one client")
    if len(set(clients)) != len(clients):
        raise ValueError("ring clients must be distinct")
    if len(clients) == 1:
        warnings.warn(
            "ring of one client: the uploaded mixed payload equals the true payload",
            PrivacyWarning,
            stacklevel=2,
        )
    k = len(clients)
    return {clients[pos]: shares2[(pos - 1) % k] for pos in range(k)}


def ring_successor(clients: Sequence[int], cid: int) -> int:
    pos = list(clients).index(cid)
    return clients[(pos + 1) % len(clients)]


def mix_local(own_share1: GradShare, received_share2: GradShare) -> MixedPayload:
    """Elementwise sum of a client's kept share and the share it received."""
    if own_share1.grad.shape != received_share2.grad.shape:
        raise ShapeError("mixed shares", own_share1.grad.shape, received_share2.grad.shape)
    tally(own_share1.grad.size + 1)
    return MixedPayload(
        own_share1.grad + received_share2.grad,
        own_share1.loss + received_share2.loss,
        round=own_share1.round,
        origin=own_share1.origin,
        item_ids=own_share1.item_ids,
        sections=own_share1.sections,
    )


def aggregate(mixed: Sequence[MixedPayload]) -> tuple[np.ndarray, float]:
    """Mean of the mixed payloads, reduced in list order for bit-stable results."""
    if not mixed:
        raise ValueError("nothing to aggregate")
    shape = mixed[0].grad.shape
    total = np.zeros(shape)
    loss = 0.0
    for m in mixed:
        if m.grad.shape != shape:
            raise ShapeError("mixed payload", shape, m.grad.shape)
        total += m.grad
        loss += m.loss
    k = len(mixed)
    tally((k + 1) * (total.size + 1))
    return total / k, loss / k


@dataclass
class RingResult:
    avg_grad: np.ndarray
    avg_loss: float
    shares1: list[GradShare]
    shares2: list[GradShare]
    deliveries: dict[int, GradShare]
    mixed: list[MixedPayload]


def secure_mean(
    clients: Sequence[int],
    payloads: Sequence[GradPayload],
    rngs: Sequence[Rng],
    bound: float = DEFAULT_MASK_BOUND,
    round: int = 0,
) -> RingResult:
    """Run split, ring delivery, local mixing and aggregation end to end.

    With a single client masking cannot hide anything, so the degenerate
    split ``(payload, 0)`` is used and a :class:`PrivacyWarning` is raised.
    """
    if len(clients) == 1:
        bound = 0.0
    pairs = [
        split_shares(p, r, bound, round=round, origin=c) for c, p, r in zip(clients, payloads, rngs)
    ]
    shares1 = [a for a, _ in pairs]
    shares2 = [b for _, b in pairs]
    deliveries = ring_pass(list(clients), shares2)
    mixed = [mix_local(s1, deliveries[c]) for c, s1 in zip(clients, shares1)]
    avg_grad, avg_loss = aggregate(mixed)
    return RingResult(avg_grad, avg_loss, shares1, shares2, deliveries, mixed)


# ---------------------------------------------------------------------------
# Wire format
# ---------------------------------------------------------------------------

_MAGIC = b"SHR1"
_HEAD = struct.Struct("<4sBBHII")  # magic, kind, n_sections, reserved, round, n_ids
_SECTION = struct.Struct("<16sQ")
KIND_SHARE = 1
KIND_MIXED = 2


def encode_message(kind: int, obj: GradShare | MixedPayload) -> bytes:
    """Header (round, section shapes, item-id list) + float64 payload + loss.

    The originating client is not part of the wire format.
    """
    sections = obj.sections or (("grad", obj.grad.size),)
    head = _HEAD.pack(_MAGIC, kind, len(sections), 0, obj.round, len(obj.item_ids))
    secs = b"".join(_SECTION.pack(name.encode()[:16], size) for name, size in sections)
    ids = np.asarray(obj.item_ids, dtype="<i8").tobytes()
    body = np.concatenate([obj.grad, [obj.loss]]).astype("<f8").tobytes()
    return head + secs + ids + body


def framing_bytes(n_sections: int, n_ids: int) -> int:
    return _HEAD.size + _SECTION.size * n_sections + 8 * n_ids


def decode_message(blob: bytes) -> dict:
    magic, kind, n_sections, _, rnd, n_ids = _HEAD.unpack_from(blob, 0)
    if magic != _MAGIC:
        raise DataError("not a share message")
    pos = _HEAD.size
    sections = []
    for _ in range(n_sections):
        name, size = _SECTION.unpack_from(blob, pos)
        sections.append((name.rstrip(b"\0").decode(), size))
        pos += _SECTION.size
    ids = tuple(int(i) for i in np.frombuffer(blob, dtype="<i8", count=n_ids, offset=pos))
    pos += 8 * n_ids
    floats = np.frombuffer(blob, dtype="<f8", offset=pos).astype(np.float64)
    if floats.size != sum(s for _, s in sections) + 1:
        raise DataError("share message length does not match its sections")
    return {
        "kind": kind,
        "round": rnd,
        "sections": tuple(sections),
        "item_ids": ids,
        "grad": floats[:-1],
        "loss": float(floats[-1]),
        "float_offset": pos,
    }
