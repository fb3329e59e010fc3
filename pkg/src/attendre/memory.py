"""Bounded memories: a data-only memory and a key-value memory.

Both keep entries in insertion order and delegate eviction to an
:class:`~attendre.policies.EvictionPolicy`. Entries are token-level: every
head of a token lives and dies together.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import CapacityError, DimensionError, EmptyMemoryError
from .policies import EvictionPolicy, PolicyKind, PolicySpec


@dataclass(frozen=True)
class Metadata:
    position: int
    document_id: Optional[str] = None
    epoch: Optional[int] = None
    valid: bool = True

    def __post_init__(self):
        if self.valid and self.position < 0:
            raise ValueError(f"position must be >= 0, got {self.position}")


@dataclass
class MemoryEntry:
    counter: int
    value: np.ndarray
    metadata: Metadata
    key: Optional[np.ndarray] = None
    score: float = 0.0

    @property
    def position(self) -> int:
        return self.metadata.position


@dataclass
class EvictedBatch:
    entries: list[MemoryEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def positions(self) -> list[int]:
        return [e.position for e in self.entries]


@dataclass
class RetrievedKV:
    """Top-K retrieval result indexed by ``(query, rank)``.

    ``similarities`` is the head-summed ranking score, ``head_similarities``
    the per-head scores that feed the softmax. ``mask`` marks pairs allowed
    after retrieval (causal masking happens here); ``weights`` holds the
    per-head normalized attention over the retrieved set.
    """

    keys: np.ndarray  # (Q, R, H, dk)
    values: np.ndarray  # (Q, R, H, dv)
    similarities: np.ndarray  # (Q, R)
    head_similarities: np.ndarray  # (Q, H, R)
    positions: np.ndarray  # (Q, R)
    counters: np.ndarray  # (Q, R)
    mask: np.ndarray  # (Q, R)
    weights: np.ndarray  # (Q, H, R)
    all_masked: np.ndarray  # (Q, H)
    metadata: list[list[Metadata]]

    @property
    def rank(self) -> int:
        return self.similarities.shape[1]


class TraceLog:
    """Line-oriented JSON event log for memory operations."""

    def __init__(self, sink: Optional[Callable[[str], None]] = None):
        self.lines: list[str] = []
        self._sink = sink

    def emit(self, event: str, **fields) -> None:
        line = json.dumps({"event": event, **fields}, sort_keys=True)
        self.lines.append(line)
        if self._sink is not None:
            self._sink(line)


def _round(xs) -> list[float]:
    return [round(float(x), 9) for x in xs]


class _BoundedStore:
    """Shared insertion-ordered storage with policy-driven eviction."""

    def __init__(self, capacity: int, policy: EvictionPolicy, name: str, trace: Optional[TraceLog]):
        if capacity < 1:
            raise CapacityError(f"capacity must be >= 1, got {capacity}")
        if (
            policy.kind is PolicyKind.ATTENTION_SINK
            and policy.spec.sink_size >= capacity
        ):
            raise CapacityError(
                f"sink size {policy.spec.sink_size} leaves no evictable slot in capacity {capacity}"
            )
        self.capacity = capacity
        self.policy = policy
        self.name = name
        self.trace = trace
        self._entries: list[MemoryEntry] = []
        self.step = 0
        self.evictions = 0

    def __len__(self) -> int:
        return len(self._entries)

    def _insert(self, values, keys, metadata: Sequence[Metadata]) -> EvictedBatch:
        n = len(metadata)
        if n > self.capacity:
            raise CapacityError(f"chunk of {n} exceeds {self.name} capacity {self.capacity}")
        current = len(self._entries)
        ids = self.policy.register(n)
        for j, i in enumerate(ids):
            self._entries.append(
                MemoryEntry(
                    counter=i,
                    value=values[j],
                    key=None if keys is None else keys[j],
                    metadata=metadata[j],
                )
            )
        chosen = self.policy.select_evictions(current, self.capacity, n)
        by_id = {e.counter: e for e in self._entries}
        evicted = [by_id[i] for i in chosen]
        for e in evicted:
            e.score = self.policy.scores.get(e.counter, 0.0)
        gone = set(chosen)
        self._entries = [e for e in self._entries if e.counter not in gone]
        self.policy.discard(chosen)
        self.evictions += len(evicted)
        self.step += 1
        if self.trace is not None:
            self.trace.emit(
                "insert",
                memory=self.name,
                step=self.step,
                positions=[m.position for m in metadata],
                scores=_round(self.policy.scores.get(i, 0.0) for i in ids),
            )
            if evicted:
                self.trace.emit(
                    "evict",
                    memory=self.name,
                    step=self.step,
                    positions=[e.position for e in evicted],
                    scores=_round(e.score for e in evicted),
                )
        return EvictedBatch(evicted)

    def get_all(self) -> list[MemoryEntry]:
        """Live entries in insertion order (nondestructive)."""
        for e in self._entries:
            e.score = self.policy.scores.get(e.counter, 0.0)
        return list(self._entries)

    @property
    def positions(self) -> list[int]:
        return [e.position for e in self._entries]


def _coerce_metadata(metadata, n: int) -> list[Metadata]:
    out = [m if isinstance(m, Metadata) else Metadata(position=int(m)) for m in metadata]
    if len(out) != n:
        raise DimensionError(f"{n} rows but {len(out)} metadata records")
    return out


class DataOnlyMemory(_BoundedStore):
    """Insert / getAll memory. Defaults to FIFO eviction."""

    def __init__(self, capacity: int, policy: Optional[EvictionPolicy] = None,
                 name: str = "data", trace: Optional[TraceLog] = None):
        if policy is None:
            policy = EvictionPolicy(PolicySpec(PolicyKind.FIFO))
        super().__init__(capacity, policy, name, trace)

    def insert(self, values, metadata) -> EvictedBatch:
        values = np.asarray(values, dtype=np.float64)
        return self._insert(values, None, _coerce_metadata(metadata, len(values)))

    def clear(self) -> list[MemoryEntry]:
        """Remove and return every entry, oldest first."""
        entries = self.get_all()
        self.policy.discard(e.counter for e in entries)
        self._entries = []
        return entries


class KeyValueMemory(_BoundedStore):
    """Insert / retrieve memory of multi-head keys and values.

    Keys are ``(n, H, dk)`` and values ``(n, H, dv)``. Retrieval ranks entries
    by the head-summed similarity, so all heads share one retrieved set.

    ``position_penalty`` maps a capped query-key distance array to an additive
    similarity bias; it is applied before ranking and before policy feedback.
    """

    def __init__(
        self,
        capacity: int,
        policy: Optional[EvictionPolicy] = None,
        name: str = "kv",
        trace: Optional[TraceLog] = None,
        scale: bool = False,
        position_penalty: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
    ):
        super().__init__(capacity, EvictionPolicy() if policy is None else policy, name, trace)
        self.scale = scale
        self.position_penalty = position_penalty
        self.similarity_ops = 0
        self.retrievals = 0
        self.max_attended = 0
        self._shape: Optional[tuple[tuple[int, ...], tuple[int, ...]]] = None

    def insert(self, keys, values, metadata) -> EvictedBatch:
        keys = np.asarray(keys, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if keys.ndim != 3 or values.ndim != 3 or keys.shape[:2] != values.shape[:2]:
            raise DimensionError(f"keys {keys.shape} / values {values.shape} must be (n, H, d)")
        shape = (keys.shape[1:], values.shape[1:])
        if self._shape is None:
            self._shape = shape
        elif shape != self._shape:
            raise DimensionError(f"entry shape {shape} differs from memory shape {self._shape}")
        return self._insert(values, keys, _coerce_metadata(metadata, len(keys)))

    def similarities(self, queries, query_positions) -> np.ndarray:
        """Per-head similarity of each query against every live entry, ``(Q, H, E)``."""
        q = np.asarray(queries, dtype=np.float64)
        keys = np.stack([e.key for e in self._entries])  # (E, H, dk)
        if q.ndim != 3 or q.shape[1:] != keys.shape[1:]:
            raise DimensionError(f"queries {q.shape} do not match keys {keys.shape[1:]}")
        sims = np.stack(
            [kernels.dot_similarity(q[:, h], keys[:, h], scale=self.scale) for h in range(q.shape[1])],
            axis=1,
        )
        if self.position_penalty is not None:
            kpos = np.array(self.positions, dtype=np.int64)
            qpos = np.asarray(query_positions, dtype=np.int64)
            sims = sims + self.position_penalty(qpos[:, None], kpos[None, :])[:, None, :]
        return sims

    def retrieve(self, queries, k: int, query_positions=None, causal: bool = False) -> RetrievedKV:
        """Top-``k`` entries per query, plus normalized attention over them.

        ``queries`` is ``(Q, H, dk)`` holding only valid queries. With
        ``causal=True`` retrieved entries positioned after the query are
        masked out of the attention (not out of the ranking).
        """
        if not self._entries:
            raise EmptyMemoryError(f"retrieve from empty memory {self.name!r}")
        q = np.asarray(queries, dtype=np.float64)
        n_q = q.shape[0]
        qpos = (
            np.zeros(n_q, dtype=np.int64)
            if query_positions is None
            else np.asarray(query_positions, dtype=np.int64)
        )
        head_sims = self.similarities(q, qpos)  # (Q, H, E)
        n_e = head_sims.shape[2]
        summed = head_sims.sum(axis=1)  # (Q, E)
        kpos = np.array(self.positions, dtype=np.int64)
        pair_ok = np.ones((n_q, n_e), dtype=bool)
        if causal:
            pair_ok = kpos[None, :] <= qpos[:, None]

        idx = kernels.top_k_rows(summed, k)  # (Q, R)
        rows = np.arange(n_q)[:, None]
        keys = np.stack([e.key for e in self._entries])
        values = np.stack([e.value for e in self._entries])
        counters = np.array([e.counter for e in self._entries], dtype=np.int64)
        mask = pair_ok[rows, idx]
        r_head = np.take_along_axis(head_sims, idx[:, None, :], axis=2)  # (Q, H, R)
        weights, all_masked = kernels.masked_softmax(
            r_head, np.broadcast_to(mask[:, None, :], r_head.shape)
        )

        retrieved = np.zeros((n_q, n_e), dtype=bool)
        retrieved[rows, idx] = True
        retrieved &= pair_ok

        self.similarity_ops += n_q * n_e
        self.retrievals += 1
        if n_q:
            self.max_attended = max(self.max_attended, int(mask.sum(axis=1).max()))

        ids = counters.tolist()
        if self.policy.spec.post_softmax:
            feedback = np.zeros((n_q, n_e))
            np.add.at(feedback, (np.broadcast_to(rows, idx.shape), idx), weights.sum(axis=1))
            self.policy.observe_attention(ids, feedback, qpos, pair_mask=retrieved, retrieved=retrieved)
        else:
            self.policy.observe_attention(ids, summed, qpos, pair_mask=pair_ok, retrieved=retrieved)

        metas = [e.metadata for e in self._entries]
        result = RetrievedKV(
            keys=keys[idx],
            values=values[idx],
            similarities=summed[rows, idx],
            head_similarities=r_head,
            positions=kpos[idx],
            counters=counters[idx],
            mask=mask,
            weights=weights,
            all_masked=all_masked,
            metadata=[[metas[j] for j in row] for row in idx.tolist()],
        )
        if self.trace is not None:
            self.trace.emit(
                "retrieve",
                memory=self.name,
                step=self.step,
                positions=qpos.tolist(),
                scores=_round(result.similarities[:, 0]) if n_q else [],
            )
        return result
