"""The wait-to-attend layer.

Each step inserts the chunk's queries into a FIFO query memory and its
keys/values into a policy-managed key-value memory. Queries evicted from the
query memory then retrieve their top-K keys/values, which by now include
positions up to ``N`` tokens past the query. ``N = 0`` degenerates to plain
memory attention with the fresh queries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .errors import ConfigError, DimensionError, OrderError
from .memory import DataOnlyMemory, KeyValueMemory, Metadata, RetrievedKV, TraceLog
from .policies import EvictionPolicy, PolicyKind, PolicySpec


def capped_distance(q_pos, k_pos, n_local: Optional[int]):
    """``|q_pos - k_pos|`` clipped to ``n_local`` (no clipping when ``None``)."""
    d = np.abs(np.asarray(q_pos, dtype=np.int64) - np.asarray(k_pos, dtype=np.int64))
    if n_local is not None:
        d = np.minimum(d, n_local)
    return d if d.ndim else int(d)


@dataclass(frozen=True)
class AttendreConfig:
    """Sizes and switches for one layer.

    ``kv_size`` is M, ``q_size`` is N (0 disables the delay), ``top_k`` is K
    and ``chunk_size`` is S. ``distance_penalty`` is the coefficient of the
    additive ``-penalty * log(1 + capped distance)`` similarity bias.
    """

    kv_size: int
    q_size: int = 0
    top_k: int = 128
    chunk_size: int = 128
    policy: PolicySpec = field(default_factory=PolicySpec)
    heads: int = 1
    head_dim: int = 16
    causal: bool = False
    scale: bool = False
    n_local: Optional[int] = None
    distance_penalty: float = 0.0

    def __post_init__(self):
        if self.kv_size < 1 or self.top_k < 1 or self.chunk_size < 1:
            raise ConfigError("kv_size, top_k and chunk_size must be >= 1")
        if self.heads < 1 or self.head_dim < 1:
            raise ConfigError("heads and head_dim must be >= 1")
        if self.q_size < 0:
            raise ConfigError("q_size must be >= 0")
        if self.chunk_size > self.kv_size:
            raise ConfigError(f"chunk_size {self.chunk_size} exceeds kv_size {self.kv_size}")
        if self.q_size > 0:
            if self.q_size >= self.kv_size:
                raise ConfigError(f"q_size {self.q_size} must be smaller than kv_size {self.kv_size}")
            if self.q_size < self.chunk_size:
                raise ConfigError(f"q_size {self.q_size} must be 0 or >= chunk_size {self.chunk_size}")
        if self.n_local is not None and self.n_local < 0:
            raise ConfigError("n_local must be >= 0")


@dataclass
class Chunk:
    """One step of input: ``S`` slots, some of which may be padding."""

    positions: np.ndarray
    valid: np.ndarray
    queries: np.ndarray  # (S, H, dk)
    keys: np.ndarray  # (S, H, dk)
    values: np.ndarray  # (S, H, dv)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.queries = np.asarray(self.queries, dtype=np.float64)
        self.keys = np.asarray(self.keys, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        n = len(self.positions)
        if not (len(self.valid) == len(self.queries) == len(self.keys) == len(self.values) == n):
            raise DimensionError("chunk fields disagree on slot count")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def valid_positions(self) -> np.ndarray:
        return self.positions[self.valid]


def make_chunks(queries, keys, values, chunk_size: int, start: int = 0) -> list[Chunk]:
    """Slice ``(T, H, d)`` arrays into chunks, zero-padding the last one."""
    q = np.asarray(queries, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    total = len(q)
    chunks = []
    for lo in range(0, max(total, 1), chunk_size):
        hi = min(lo + chunk_size, total)
        pad = chunk_size - (hi - lo)
        pos = np.arange(start + lo, start + lo + chunk_size)
        valid = np.arange(chunk_size) < (hi - lo)

        def fill(a):
            return np.concatenate([a[lo:hi], np.zeros((pad,) + a.shape[1:])])

        chunks.append(Chunk(pos, valid, fill(q), fill(k), fill(v)))
    return chunks


@dataclass
class AttendedOutput:
    """Outputs for one batch of evicted query slots.

    ``outputs`` rows of invalid slots are zero. ``retrieval`` covers only
    the valid slots, in order.
    """

    positions: np.ndarray
    valid: np.ndarray
    outputs: np.ndarray  # (n, H, dv)
    retrieval: Optional[RetrievedKV] = None

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def valid_positions(self) -> np.ndarray:
        return self.positions[self.valid]

    @property
    def valid_outputs(self) -> np.ndarray:
        return self.outputs[self.valid]


class AttendreLayer:
    def __init__(self, config: AttendreConfig, trace: Optional[TraceLog] = None):
        self.config = config
        penalty = None
        if config.distance_penalty:
            beta, n_local = config.distance_penalty, config.n_local

            def penalty(qp, kp):
                return -beta * np.log1p(capped_distance(qp, kp, n_local))

        self.kv_memory = KeyValueMemory(
            config.kv_size,
            EvictionPolicy(config.policy),
            name="kv",
            trace=trace,
            scale=config.scale,
            position_penalty=penalty,
        )
        self.q_memory = (
            DataOnlyMemory(config.q_size, EvictionPolicy(PolicySpec(PolicyKind.FIFO)), name="q", trace=trace)
            if config.q_size > 0
            else None
        )
        self.steps = 0
        self._last_position = -1
        self._value_dim: Optional[int] = None

    # counters -------------------------------------------------------------
    @property
    def similarity_ops(self) -> int:
        return self.kv_memory.similarity_ops

    @property
    def evictions(self) -> int:
        return self.kv_memory.evictions

    @property
    def retrievals(self) -> int:
        return self.kv_memory.retrievals

    @property
    def max_attended(self) -> int:
        return self.kv_memory.max_attended

    # -----------------------------------------------------------------------
    def _check(self, chunk: Chunk) -> None:
        cfg = self.config
        if len(chunk) != cfg.chunk_size:
            raise DimensionError(f"chunk has {len(chunk)} slots, expected {cfg.chunk_size}")
        expect = (cfg.heads, cfg.head_dim)
        if chunk.queries.shape[1:] != expect or chunk.keys.shape[1:] != expect:
            raise DimensionError(f"queries/keys must be (S, {cfg.heads}, {cfg.head_dim})")
        if chunk.values.ndim != 3 or chunk.values.shape[1] != cfg.heads:
            raise DimensionError(f"values must be (S, {cfg.heads}, dv)")
        pos = chunk.valid_positions
        if pos.size:
            if np.any(np.diff(pos) <= 0) or pos[0] <= self._last_position:
                raise OrderError("valid positions must strictly increase across the stream")
            self._last_position = int(pos[-1])
        self._value_dim = chunk.values.shape[2]

    def step(self, chunk: Chunk) -> Optional[AttendedOutput]:
        """Consume one chunk; return outputs for any query slots released.

        Returns ``None`` while the query memory is still filling up.
        """
        self._check(chunk)
        self.steps += 1
        meta = [
            Metadata(position=int(p), valid=bool(ok))
            for p, ok in zip(chunk.positions, chunk.valid)
        ]
        if self.q_memory is not None:
            evicted = self.q_memory.insert(chunk.queries, meta)
        if chunk.valid.any():
            keep = chunk.valid
            self.kv_memory.insert(
                chunk.keys[keep], chunk.values[keep], [m for m, ok in zip(meta, keep) if ok]
            )
        if self.q_memory is None:
            return self._attend(chunk.queries, chunk.positions, chunk.valid)
        if not len(evicted):
            return None
        return self._attend(
            np.stack([e.value for e in evicted]),
            np.array([e.metadata.position for e in evicted]),
            np.array([e.metadata.valid for e in evicted]),
        )

    def flush(self) -> AttendedOutput:
        """Attend with every query still waiting in the query memory."""
        if self.q_memory is None or not len(self.q_memory):
            dv = self._value_dim or self.config.head_dim
            return AttendedOutput(
                np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool),
                np.zeros((0, self.config.heads, dv)),
            )
        entries = self.q_memory.clear()
        return self._attend(
            np.stack([e.value for e in entries]),
            np.array([e.metadata.position for e in entries]),
            np.array([e.metadata.valid for e in entries]),
        )

    def _attend(self, queries, positions, valid) -> AttendedOutput:
        cfg = self.config
        dv = self._value_dim or cfg.head_dim
        out = np.zeros((len(positions), cfg.heads, dv))
        retrieval = None
        if valid.any() and len(self.kv_memory):
            retrieval = self.kv_memory.retrieve(
                queries[valid], cfg.top_k, query_positions=positions[valid], causal=cfg.causal
            )
            heads = [
                kernels.weighted_value_sum(retrieval.weights[:, h, :], retrieval.values[:, :, h, :])
                for h in range(cfg.heads)
            ]
            out[valid] = np.stack(heads, axis=1)
        return AttendedOutput(np.asarray(positions, dtype=np.int64), np.asarray(valid, dtype=bool), out, retrieval)
