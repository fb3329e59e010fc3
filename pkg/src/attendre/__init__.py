"""Streaming attention memories with eviction policies and delayed queries."""

from .errors import (
    AlignmentError,
    AttendreError,
    CapacityError,
    ConfigError,
    DimensionError,
    EmptyInput,
    EmptyMemoryError,
    OrderError,
)
from .harness import (
    AttendreStack,
    DrainMode,
    EncoderDecoder,
    EncoderDecoderConfig,
    StackConfig,
    StreamChunk,
    StreamStats,
    chunk_hidden,
    dense_oracle,
    run_encoder_decoder,
    run_stack,
)
from .layer import AttendedOutput, AttendreConfig, AttendreLayer, Chunk, capped_distance, make_chunks
from .memory import DataOnlyMemory, EvictedBatch, KeyValueMemory, MemoryEntry, Metadata, RetrievedKV, TraceLog
from .policies import EvictionPolicy, PolicyKind, PolicySpec, ScoreStats

__version__ = "0.1.0"
