"""Model-level wiring: time-shifted layer stacks, encoder output memory and
the dense-attention oracle.

Layers are joined by an identity combiner: the flattened attention output
of one layer is the hidden state the next layer projects into q/k/v. There
are no feed-forward blocks or norms, so the dense oracle stays exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import AlignmentError, ConfigError, DimensionError, OrderError
from .layer import AttendreConfig, AttendreLayer, Chunk
from .memory import DataOnlyMemory, Metadata, TraceLog


# --------------------------------------------------------------------------
# dense oracle
# --------------------------------------------------------------------------

def causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def bidirectional_mask(t: int) -> np.ndarray:
    return np.ones((t, t), dtype=bool)


def prefix_mask(t: int, prefix: int) -> np.ndarray:
    """Bidirectional inside the first ``prefix`` positions, causal after."""
    m = causal_mask(t)
    m[:prefix, :prefix] = True
    return m


def dense_oracle(queries, keys, values, mask, scale: bool = False) -> np.ndarray:
    """Single-pass softmax attention over full sequences.

    Accepts ``(T, d)`` or multi-head ``(T, H, d)`` inputs; ``mask`` is a
    ``(Tq, Tk)`` boolean matrix of allowed pairs.
    """
    q = np.asarray(queries, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    single = q.ndim == 2
    if single:
        q, k, v = q[:, None], k[:, None], v[:, None]
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise DimensionError("dense_oracle expects (T, d) or (T, H, d) arrays")
    if k.shape[:2] != v.shape[:2] or q.shape[1] != k.shape[1]:
        raise DimensionError(f"shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    m = np.asarray(mask, dtype=bool)
    if m.shape != (q.shape[0], k.shape[0]):
        raise DimensionError(f"mask {m.shape} does not match ({q.shape[0]}, {k.shape[0]})")
    out = np.empty((q.shape[0], q.shape[1], v.shape[2]))
    for h in range(q.shape[1]):
        w, _ = kernels.masked_softmax(kernels.dot_similarity(q[:, h], k[:, h], scale=scale), m)
        out[:, h] = w @ v[:, h]
    return out[:, 0] if single else out


# --------------------------------------------------------------------------
# stacks
# --------------------------------------------------------------------------

class DrainMode(str, Enum):
    FLUSH = "flush"
    DRAIN = "drain"


@dataclass(frozen=True)
class StackConfig:
    layers: int
    layer: AttendreConfig
    drain_mode: DrainMode = DrainMode.DRAIN
    seed: int = 0
    project: bool = True

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        object.__setattr__(self, "drain_mode", DrainMode(self.drain_mode))

    @property
    def d_model(self) -> int:
        return self.layer.heads * self.layer.head_dim


@dataclass
class StreamChunk:
    """``S`` slots of hidden states; invalid slots are padding."""

    positions: np.ndarray
    valid: np.ndarray
    hidden: np.ndarray  # (S, d_model)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.hidden = np.asarray(self.hidden, dtype=np.float64)


def chunk_hidden(hidden, chunk_size: int, start: int = 0) -> list[StreamChunk]:
    """Slice ``(T, d_model)`` hidden states into padded chunks."""
    x = np.asarray(hidden, dtype=np.float64)
    out = []
    for lo in range(0, max(len(x), 1), chunk_size):
        n = min(chunk_size, len(x) - lo)
        h = np.zeros((chunk_size, x.shape[1]))
        h[:n] = x[lo:lo + n]
        out.append(StreamChunk(np.arange(start + lo, start + lo + chunk_size),
                               np.arange(chunk_size) < n, h))
    return out


@dataclass
class StreamStats:
    chunks: int = 0
    similarity_ops: list[int] = field(default_factory=list)
    max_attended: list[int] = field(default_factory=list)
    evictions: dict[str, int] = field(default_factory=dict)
    drain_padding: int = 0

    def within_bounds(self, config: AttendreConfig) -> bool:
        """``sim ops <= (C*S + N) * M`` and ``attended <= K`` for every layer."""
        bound = (self.chunks * config.chunk_size + config.q_size) * config.kv_size
        return all(ops <= bound for ops in self.similarity_ops) and all(
            a <= config.top_k for a in self.max_attended
        )


@dataclass
class StackResult:
    positions: np.ndarray  # valid output positions, in order
    outputs: np.ndarray  # (T, d_model)
    stats: StreamStats
    slot_positions: np.ndarray  # trimmed output slots, aligned to input slots
    slot_valid: np.ndarray


def _projections(config: StackConfig) -> list[Optional[np.ndarray]]:
    if not config.project:
        return [None] * config.layers
    rng = np.random.default_rng(config.seed)
    d, h, hd = config.d_model, config.layer.heads, config.layer.head_dim
    return [rng.standard_normal((3, d, h, hd)) / math.sqrt(d) for _ in range(config.layers)]


def _qkv(proj: Optional[np.ndarray], hidden: np.ndarray, heads: int, head_dim: int):
    if proj is None:
        x = hidden.reshape(len(hidden), heads, head_dim)
        return x, x, x
    return tuple(np.einsum("sd,dhk->shk", hidden, proj[i]) for i in range(3))


class AttendreStack:
    """``L`` wait-to-attend layers joined by identity combiners."""

    def __init__(self, config: StackConfig, trace: Optional[TraceLog] = None):
        self.config = config
        self.layers = [AttendreLayer(config.layer, trace=trace) for _ in range(config.layers)]
        self.projections = _projections(config)

    def _chunk_for(self, i: int, sc: StreamChunk) -> Chunk:
        cfg = self.config.layer
        q, k, v = _qkv(self.projections[i], sc.hidden, cfg.heads, cfg.head_dim)
        return Chunk(sc.positions, sc.valid, q, k, v)

    def oracle(self, hidden, mask) -> np.ndarray:
        """Dense attention through the same layers and projections."""
        cfg = self.config.layer
        x = np.asarray(hidden, dtype=np.float64)
        for proj in self.projections:
            q, k, v = _qkv(proj, x, cfg.heads, cfg.head_dim)
            x = dense_oracle(q, k, v, mask, scale=cfg.scale).reshape(len(x), -1)
        return x

    def _validate(self, chunks: Sequence[StreamChunk]) -> None:
        s, d = self.config.layer.chunk_size, self.config.d_model
        last = -1
        for c in chunks:
            if len(c.positions) != s or len(c.valid) != s or c.hidden.shape != (s, d):
                raise AlignmentError(f"stream chunk must have {s} slots of width {d}")
            pos = c.positions[c.valid]
            if pos.size and (np.any(np.diff(pos) <= 0) or pos[0] <= last):
                raise AlignmentError("valid positions must strictly increase across the stream")
            if pos.size:
                last = int(pos[-1])

    def run(self, chunks: Iterable[StreamChunk]) -> StackResult:
        chunks = list(chunks)
        self._validate(chunks)
        if self.config.drain_mode is DrainMode.DRAIN:
            result = self._run_drain(chunks)
        else:
            result = self._run_flush(chunks)
        stats = result.stats
        stats.chunks = len(chunks)
        stats.similarity_ops = [l.similarity_ops for l in self.layers]
        stats.max_attended = [l.max_attended for l in self.layers]
        label = self.config.layer.policy.label
        stats.evictions = {label: sum(l.evictions for l in self.layers)}
        return result

    def _run_drain(self, chunks: list[StreamChunk]) -> StackResult:
        cfg = self.config.layer
        s, d = cfg.chunk_size, self.config.d_model
        shift = cfg.q_size * self.config.layers
        n_pad_chunks = -(-shift // s)
        padding = [
            StreamChunk(np.full(s, -1), np.zeros(s, dtype=bool), np.zeros((s, d)))
            for _ in range(n_pad_chunks)
        ]
        emitted: list[StreamChunk] = []
        for chunk in chunks + padding:
            cur = chunk
            for i, layer in enumerate(self.layers):
                out = layer.step(self._chunk_for(i, cur))
                n = 0 if out is None else len(out)
                gap = s - n
                pos = np.full(gap, -1, dtype=np.int64)
                valid = np.zeros(gap, dtype=bool)
                hid = np.zeros((gap, d))
                if out is not None:
                    pos = np.concatenate([pos, out.positions])
                    valid = np.concatenate([valid, out.valid])
                    hid = np.concatenate([hid, out.outputs.reshape(n, -1)])
                cur = StreamChunk(np.where(valid, pos, -1), valid, hid)
            emitted.append(cur)

        total = len(chunks) * s
        slot_pos = np.concatenate([c.positions for c in emitted])[shift:]
        slot_valid = np.concatenate([c.valid for c in emitted])[shift:]
        hidden = np.concatenate([c.hidden for c in emitted])[shift:]
        if slot_valid[total:].any():
            raise AlignmentError("valid outputs found past the end of the trimmed stream")
        slot_pos, slot_valid, hidden = slot_pos[:total], slot_valid[:total], hidden[:total]
        in_valid = np.concatenate([c.valid for c in chunks]) if chunks else np.zeros(0, bool)
        in_pos = np.concatenate([c.positions for c in chunks]) if chunks else np.zeros(0, np.int64)
        if not np.array_equal(slot_valid, in_valid) or not np.array_equal(
            slot_pos[slot_valid], in_pos[in_valid]
        ):
            raise AlignmentError("trimmed output slots do not line up with the input")
        stats = StreamStats(drain_padding=n_pad_chunks * s)
        return StackResult(slot_pos[slot_valid], hidden[slot_valid], stats, slot_pos, slot_valid)

    def _run_flush(self, chunks: list[StreamChunk]) -> StackResult:
        d = self.config.d_model
        cur = chunks
        for i, layer in enumerate(self.layers):
            by_pos: dict[int, np.ndarray] = {}
            outs = [layer.step(self._chunk_for(i, c)) for c in cur]
            outs.append(layer.flush())
            for out in outs:
                if out is None:
                    continue
                for p, o in zip(out.valid_positions.tolist(), out.valid_outputs):
                    if p in by_pos:
                        raise AlignmentError(f"position {p} emitted twice")
                    by_pos[p] = o.reshape(-1)
            nxt = []
            for c in chunks:
                h = np.zeros((len(c.positions), d))
                for j in np.flatnonzero(c.valid):
                    p = int(c.positions[j])
                    if p not in by_pos:
                        raise AlignmentError(f"position {p} never emitted")
                    h[j] = by_pos.pop(p)
                nxt.append(StreamChunk(c.positions, c.valid, h))
            if by_pos:
                raise AlignmentError(f"unexpected output positions {sorted(by_pos)[:5]}")
            cur = nxt
        slot_pos = np.concatenate([c.positions for c in cur])
        slot_valid = np.concatenate([c.valid for c in cur])
        hidden = np.concatenate([c.hidden for c in cur])
        return StackResult(slot_pos[slot_valid], hidden[slot_valid], StreamStats(), slot_pos, slot_valid)


def run_stack(config: StackConfig, chunks: Iterable[StreamChunk],
              trace: Optional[TraceLog] = None) -> StackResult:
    return AttendreStack(config, trace=trace).run(chunks)


# --------------------------------------------------------------------------
# encoder-decoder
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderDecoderConfig:
    encoder: StackConfig
    output_memory_size: int
    decoder_chunk_size: int = 1

    def __post_init__(self):
        if self.output_memory_size < 1:
            raise ConfigError("output_memory_size must be >= 1")
        if self.decoder_chunk_size < 1:
            raise ConfigError("decoder_chunk_size must be >= 1")


class EncoderDecoder:
    """Encoder stack feeding a FIFO encoder-output memory.

    Decoder cross attention reads the whole memory densely, using the stored
    encoder outputs as both keys and values.
    """

    def __init__(self, config: EncoderDecoderConfig, trace: Optional[TraceLog] = None):
        self.config = config
        self.encoder = AttendreStack(config.encoder, trace=trace)
        self.output_memory = DataOnlyMemory(config.output_memory_size, name="encoder_output", trace=trace)
        self.encoded: Optional[StackResult] = None

    def encode(self, chunks: Iterable[StreamChunk]) -> StackResult:
        if self.encoded is not None:
            raise OrderError("encoder already ran")
        result = self.encoder.run(chunks)
        s = self.config.encoder.layer.chunk_size
        o = self.config.output_memory_size
        step = min(s, o)
        for lo in range(0, len(result.positions), step):
            pos = result.positions[lo:lo + step]
            self.output_memory.insert(result.outputs[lo:lo + step], [Metadata(int(p)) for p in pos])
        self.encoded = result
        return result

    def memory_contents(self) -> tuple[np.ndarray, np.ndarray]:
        entries = self.output_memory.get_all()
        pos = np.array([e.position for e in entries], dtype=np.int64)
        vals = np.stack([e.value for e in entries]) if entries else np.zeros((0, self.config.encoder.d_model))
        return pos, vals

    def decode(self, queries) -> np.ndarray:
        """Dense cross attention of ``(n, d_model)`` decoder queries."""
        if self.encoded is None:
            raise OrderError("decode called before encoding completed")
        q = np.asarray(queries, dtype=np.float64)
        _, mem = self.memory_contents()
        out = np.zeros((len(q), mem.shape[1]))
        b = self.config.decoder_chunk_size
        for lo in range(0, len(q), b):
            block = q[lo:lo + b]
            w, _ = kernels.masked_softmax(
                kernels.dot_similarity(block, mem), np.ones((len(block), len(mem)), dtype=bool)
            )
            out[lo:lo + b] = w @ mem
        return out


def run_encoder_decoder(config: EncoderDecoderConfig, chunks: Iterable[StreamChunk],
                        decode_steps: Sequence) -> list[np.ndarray]:
    """Encode the full stream, then run each decode step's queries."""
    model = EncoderDecoder(config)
    model.encode(chunks)
    return [model.decode(q) for q in decode_steps]
