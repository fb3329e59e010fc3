"""Eviction policies for bounded attention memories.

A policy tracks every live entry by its insertion counter and keeps one
ranking score per entry. Lower scores are evicted first; ties go to the
older entry. What the score means depends on the policy:

* FIFO, ATTENTION_SINK: unused, eviction follows insertion order.
* LRU: position of the last query that retrieved the entry.
* LFU: number of steps in which the entry was retrieved.
* LRA_LAST / LRA_MAX / LRA_SUM: attention score pooled over this step's
  queries (last valid query, max, or sum).
* LFA: exponentially decayed attention score accumulated over all steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import CapacityError, ConfigError, OrderError


class PolicyKind(str, Enum):
    FIFO = "fifo"
    LRU = "lru"
    LFU = "lfu"
    ATTENTION_SINK = "sink"
    LRA_LAST = "lra_last"
    LRA_MAX = "lra_max"
    LRA_SUM = "lra_sum"
    LFA = "lfa"


SCORELESS = {PolicyKind.FIFO, PolicyKind.ATTENTION_SINK}
LRA_KINDS = {PolicyKind.LRA_LAST, PolicyKind.LRA_MAX, PolicyKind.LRA_SUM}


@dataclass(frozen=True)
class PolicySpec:
    """Policy choice plus its parameters.

    ``initial_offset`` is ``c`` in the ``mean - c * std`` initial score.
    ``post_softmax`` switches LRA/LFA feedback from raw (transformed)
    similarities to normalized attention weights.
    """

    kind: PolicyKind = PolicyKind.FIFO
    sink_size: int = 4
    decay: float = 0.0
    initial_offset: float = 1.0
    post_softmax: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if self.sink_size < 0:
            raise ConfigError(f"sink_size must be >= 0, got {self.sink_size}")
        if not (self.decay >= 0 and math.isfinite(self.decay)):
            raise ConfigError(f"decay must be a finite value >= 0, got {self.decay}")
        if not math.isfinite(self.initial_offset):
            raise ConfigError("initial_offset must be finite")

    @property
    def label(self) -> str:
        if self.kind is PolicyKind.ATTENTION_SINK:
            return f"sink:{self.sink_size}"
        if self.kind is PolicyKind.LFA:
            return f"lfa:{self.decay:g}"
        return self.kind.value

    @classmethod
    def parse(cls, text: str, **defaults) -> "PolicySpec":
        """Parse ``fifo``, ``sink:4``, ``lfa:0.001``, ``lra_sum`` and friends."""
        name, _, arg = text.strip().lower().partition(":")
        aliases = {"mt": "fifo", "as": "sink", "attention_sink": "sink"}
        name = aliases.get(name, name)
        try:
            kind = PolicyKind(name)
        except ValueError:
            raise ConfigError(f"unknown policy {text!r}") from None
        params = dict(defaults)
        if arg:
            try:
                if kind is PolicyKind.ATTENTION_SINK:
                    params["sink_size"] = int(arg)
                elif kind is PolicyKind.LFA:
                    params["decay"] = float(arg)
                else:
                    raise ConfigError(f"policy {name!r} takes no argument")
            except ValueError:
                raise ConfigError(f"bad policy argument in {text!r}") from None
        return cls(kind=kind, **params)


@dataclass(frozen=True)
class ScoreStats:
    mean: float
    std: float
    initial_offset: float

    @classmethod
    def from_scores(cls, scores: Iterable[float], initial_offset: float) -> "ScoreStats":
        arr = np.fromiter(scores, dtype=np.float64)
        if arr.size == 0:
            return cls(0.0, 0.0, initial_offset)
        # population std: a single entry has std 0
        return cls(float(arr.mean()), float(arr.std()), initial_offset)

    @property
    def initial_score(self) -> float:
        return self.mean - self.initial_offset * self.std


def _rank_key(score: float) -> float:
    # 12 significant digits: ties that are exact in real arithmetic but differ
    # by float rounding (e.g. mean - std landing one ulp low) stay ties
    return float(f"{score:.12g}")


class EvictionPolicy:
    """Per-memory eviction bookkeeping."""

    def __init__(self, spec: Optional[PolicySpec] = None):
        self.spec = PolicySpec() if spec is None else spec
        # insertion counter -> ranking score; dict order is insertion order
        self.scores: dict[int, float] = {}
        self.i_max: Optional[int] = None
        self.i_prev_max: Optional[int] = None
        self._next_counter = 0

    @property
    def kind(self) -> PolicyKind:
        return self.spec.kind

    def __len__(self) -> int:
        return len(self.scores)

    def stats(self) -> ScoreStats:
        return ScoreStats.from_scores(self.scores.values(), self.spec.initial_offset)

    def initial_score(self) -> float:
        """``mean - c * std`` over the live entries, or 0 for an empty memory."""
        if self.kind in SCORELESS:
            return 0.0
        return self.stats().initial_score

    def register(self, n: int) -> list[int]:
        """Track ``n`` new entries and return their insertion counters."""
        init = self.initial_score()
        ids = list(range(self._next_counter, self._next_counter + n))
        self._next_counter += n
        for i in ids:
            self.scores[i] = init
        return ids

    def discard(self, ids: Iterable[int]) -> None:
        for i in ids:
            self.scores.pop(i, None)

    def observe_attention(
        self,
        ids: Sequence[int],
        attn,
        query_positions,
        query_mask=None,
        pair_mask=None,
        retrieved=None,
    ) -> None:
        """Feed one step's attention scores back into the policy.

        ``attn`` is ``(queries, entries)`` and already summed over heads.
        ``pair_mask`` marks allowed query-entry pairs (defaults to all pairs of
        valid queries). ``retrieved`` marks pairs where the entry was among the
        query's retrieved set; it drives LRU/LFU and defaults to ``pair_mask``.
        """
        attn = np.asarray(attn, dtype=np.float64)
        n_q, n_e = attn.shape
        if n_e != len(ids):
            raise ValueError(f"attn has {n_e} columns for {len(ids)} entries")
        pos = np.asarray(query_positions, dtype=np.int64)
        qmask = np.ones(n_q, dtype=bool) if query_mask is None else np.asarray(query_mask, bool)
        valid_pos = pos[qmask]
        if valid_pos.size and np.any(np.diff(valid_pos) < 0):
            raise OrderError("query positions must be nondecreasing")
        if not valid_pos.size:
            return
        allowed = np.ones((n_q, n_e), dtype=bool) if pair_mask is None else np.asarray(pair_mask, bool)
        allowed = allowed & qmask[:, None]
        used = allowed if retrieved is None else (np.asarray(retrieved, bool) & qmask[:, None])

        step_max = int(valid_pos.max())
        prev = self.i_max
        self.i_max = step_max if prev is None else max(prev, step_max)
        self.i_prev_max = self.i_max if prev is None else prev

        kind = self.kind
        if kind in SCORELESS:
            return
        if kind is PolicyKind.LRU:
            last = np.where(used, pos[:, None], -1).max(axis=0)
            for j, i in enumerate(ids):
                if last[j] >= 0:
                    self.scores[i] = float(last[j])
        elif kind is PolicyKind.LFU:
            hit = used.any(axis=0)
            for j, i in enumerate(ids):
                if hit[j]:
                    self.scores[i] += 1.0
        elif kind is PolicyKind.LRA_LAST:
            last_q = int(np.flatnonzero(qmask)[-1])
            for j, i in enumerate(ids):
                if allowed[last_q, j]:
                    self.scores[i] = float(attn[last_q, j])
        elif kind is PolicyKind.LRA_MAX:
            pooled = np.where(allowed, attn, -np.inf).max(axis=0)
            hit = allowed.any(axis=0)
            for j, i in enumerate(ids):
                if hit[j]:
                    self.scores[i] = float(pooled[j])
        elif kind is PolicyKind.LRA_SUM:
            pooled = np.where(allowed, attn, 0.0).sum(axis=0)
            hit = allowed.any(axis=0)
            for j, i in enumerate(ids):
                if hit[j]:
                    self.scores[i] = float(pooled[j])
        elif kind is PolicyKind.LFA:
            lam = self.spec.decay
            carry = math.exp(lam * (self.i_prev_max - self.i_max))
            row_decay = np.exp(lam * (pos - self.i_max).astype(np.float64))
            fresh = (np.where(allowed, attn, 0.0) * row_decay[:, None]).sum(axis=0)
            col = {i: j for j, i in enumerate(ids)}
            for i in self.scores:
                s = self.scores[i] * carry
                if i in col:
                    s += float(fresh[col[i]])
                self.scores[i] = s

    def eviction_order(self) -> list[int]:
        """All evictable entries, first-to-go first."""
        live = list(self.scores)
        if self.kind is PolicyKind.FIFO:
            return sorted(live)
        if self.kind is PolicyKind.ATTENTION_SINK:
            return sorted(i for i in live if i >= self.spec.sink_size)
        return sorted(live, key=lambda i: (_rank_key(self.scores[i]), i))

    def select_evictions(self, current_size: int, capacity: int, n_incoming: int) -> list[int]:
        """Pick ``max(0, current_size + n_incoming - capacity)`` entries to evict.

        Incoming entries must already be registered, so they compete with the
        existing ones.
        """
        if capacity < 1:
            raise CapacityError(f"capacity must be >= 1, got {capacity}")
        if n_incoming > capacity:
            raise CapacityError(f"chunk of {n_incoming} exceeds capacity {capacity}")
        overflow = max(0, current_size + n_incoming - capacity)
        if overflow == 0:
            return []
        order = self.eviction_order()
        if len(order) < overflow:
            raise CapacityError(
                f"need {overflow} evictions but only {len(order)} entries are evictable"
            )
        return order[:overflow]
