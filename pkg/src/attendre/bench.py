"""Seeded synthetic retention tasks and policy x memory-size sweeps.

The metrics are retention rate (did every distinguished key/value survive
to the final step) and final attention mass on the distinguished entries.
They stand in for exact-match accuracy, which needs real pretrained models.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError
from .harness import bidirectional_mask, causal_mask
from .layer import AttendreConfig, AttendreLayer, Chunk, make_chunks
from .memory import TraceLog
from .policies import PolicySpec

CSV_SCHEMA = "attendre-sweep-csv/1"
CSV_COLUMNS = [
    "policy", "M", "N", "K", "S", "task", "trials",
    "retention_rate", "final_attention_mass", "sim_ops", "evictions",
]
METRIC_NOTE = "metrics: retention rate and attention mass (not exact-match accuracy)"


class TaskKind(str, Enum):
    NEEDLE = "needle"
    QUESTION_FIRST = "question_first"


@dataclass(frozen=True)
class TaskParams:
    kind: TaskKind = TaskKind.NEEDLE
    seq_len: int = 128
    chunk_size: int = 4
    heads: int = 1
    head_dim: int = 16
    n_distinguished: int = 2
    mass: float = 0.8
    # planted mass for ordinary context queries in QUESTION_FIRST
    context_mass: float = 0.3
    noise: float = 0.5

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", TaskKind(self.kind))
        except ValueError:
            raise ConfigError(f"unknown task {self.kind!r}") from None
        if self.seq_len < 1 or self.chunk_size < 1 or self.heads < 1:
            raise ConfigError("seq_len, chunk_size and heads must be >= 1")
        if self.head_dim < 2:
            raise ConfigError("head_dim must be >= 2")
        if not 1 <= self.n_distinguished <= min(self.seq_len, self.chunk_size):
            raise ConfigError("n_distinguished must fit inside the first chunk")
        for name in ("mass", "context_mass"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if not 0.0 <= self.noise < 1.0:
            raise ConfigError("noise must lie in [0, 1)")


@dataclass
class TaskInstance:
    params: TaskParams
    queries: np.ndarray  # (T, H, d)
    keys: np.ndarray
    values: np.ndarray
    distinguished: np.ndarray  # key positions that should be kept
    probes: np.ndarray  # query positions whose final attention is measured
    chunks: list[Chunk] = field(default_factory=list)


def _bounded_noise(rng: np.random.Generator, shape, dim: int, bound: float) -> np.ndarray:
    """Gaussian vectors in the subspace orthogonal to axis 0, norms <= bound."""
    x = rng.standard_normal(shape + (dim,))
    x[..., 0] = 0.0
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    scale = bound * rng.uniform(0.0, 1.0, shape + (1,))
    return x / np.maximum(norms, 1e-12) * scale


def planted_similarity(mass: float, total: int, n_planted: int, noise: float) -> float:
    """Query-to-planted-key similarity that guarantees at least ``mass``.

    Every other key scores at most ``noise**2`` against any query, so a
    query attending over up to ``total`` keys puts at least ``mass`` on the
    planted ones when ``exp(sim) >= mass/(1-mass) * (total-n)/n * exp(noise**2)``.
    """
    others = max(total - n_planted, 1)
    return math.log(mass / (1 - mass) * others / n_planted) + noise**2 + 1.0


def generate_task(params: TaskParams, seed: int) -> TaskInstance:
    """Build a deterministic synthetic stream.

    Distinguished keys sit at the first positions of chunk 0 and point along
    axis 0 of every head; all other keys are confined to the orthogonal
    subspace. NEEDLE queries all lean on the distinguished keys; in
    QUESTION_FIRST only the final query (the probe) leans hard, the context
    leans with ``context_mass``.
    """
    p = params
    rng = np.random.default_rng(seed)
    t, h, d, n = p.seq_len, p.heads, p.head_dim, p.n_distinguished
    keys = _bounded_noise(rng, (t, h), d, p.noise)
    keys[:n] = 0.0
    keys[:n, :, 0] = 1.0
    queries = _bounded_noise(rng, (t, h), d, p.noise)
    strong = planted_similarity(p.mass, t, n, p.noise)
    if p.kind is TaskKind.NEEDLE:
        queries[:, :, 0] = strong
        probes = np.arange(max(0, (t - 1) // p.chunk_size * p.chunk_size), t)
    else:
        queries[:, :, 0] = planted_similarity(p.context_mass, t, n, p.noise)
        queries[-1, :, 0] = strong
        probes = np.array([t - 1])
    values = rng.standard_normal((t, h, d))
    inst = TaskInstance(p, queries, keys, values, np.arange(n), probes)
    inst.chunks = make_chunks(queries, keys, values, p.chunk_size)
    return inst


def oracle_mass(task: TaskInstance, causal: bool = False) -> np.ndarray:
    """Dense-attention mass on the distinguished keys, per query, head-averaged."""
    t = len(task.queries)
    mask = causal_mask(t) if causal else bidirectional_mask(t)
    masses = np.zeros(t)
    for hd in range(task.queries.shape[1]):
        w, _ = kernels.masked_softmax(
            kernels.dot_similarity(task.queries[:, hd], task.keys[:, hd]), mask
        )
        masses += w[:, task.distinguished].sum(axis=1)
    return masses / task.queries.shape[1]


@dataclass
class TrialResult:
    retained: bool
    attention_mass: float
    similarity_ops: int
    evictions: int
    max_attended: int
    within_bounds: bool


def run_trial(task: TaskInstance, config: AttendreConfig,
              trace: Optional[TraceLog] = None) -> TrialResult:
    layer = AttendreLayer(config, trace=trace)
    outputs = [layer.step(c) for c in task.chunks]
    live = set(layer.kv_memory.positions)
    retained = all(int(p) in live for p in task.distinguished)
    outputs.append(layer.flush())

    probes = set(task.probes.tolist())
    dist = task.distinguished
    masses = []
    for out in outputs:
        if out is None or out.retrieval is None:
            continue
        r = out.retrieval
        hit = np.isin(r.positions, dist) & r.mask  # (Q, R)
        per_q = (r.weights * hit[:, None, :]).sum(axis=2).mean(axis=1)
        for pos, m in zip(out.valid_positions.tolist(), per_q):
            if pos in probes:
                masses.append(float(m))
    n_chunks = len(task.chunks)
    bound = (n_chunks * config.chunk_size + config.q_size) * config.kv_size
    return TrialResult(
        retained=retained,
        attention_mass=float(np.mean(masses)) if masses else 0.0,
        similarity_ops=layer.similarity_ops,
        evictions=layer.evictions,
        max_attended=layer.max_attended,
        within_bounds=layer.similarity_ops <= bound and layer.max_attended <= config.top_k,
    )


# --------------------------------------------------------------------------
# sweep configuration
# --------------------------------------------------------------------------

DEFAULT_POLICIES = ("fifo", "sink:4", "lru", "lfu", "lra_last", "lra_max", "lra_sum", "lfa:0", "lfa:0.001")


@dataclass(frozen=True)
class SweepConfig:
    policies: tuple[str, ...] = DEFAULT_POLICIES
    m: tuple[int, ...] = (16,)
    # explicit sizes paired with m, a single value for all, or "half" for M/2
    n: tuple[int, ...] | str = (0,)
    k: int = 16
    chunk: int = 4
    task: str = "needle"
    seq_len: int = 128
    trials: int = 20
    seed: int = 0
    heads: int = 1
    head_dim: int = 16
    mass: float = 0.8
    n_distinguished: int = 2
    initial_offset: float = 1.0
    sink_size: int = 4
    causal: bool = False
    out: str = "sweep.csv"

    def pairs(self) -> list[tuple[int, int]]:
        if self.n == "half":
            return [(m, m // 2) for m in self.m]
        if isinstance(self.n, str):
            raise ConfigError(f"n must be integers or 'half', got {self.n!r}")
        if len(self.n) == 1:
            return [(m, self.n[0]) for m in self.m]
        if len(self.n) != len(self.m):
            raise ConfigError(f"{len(self.n)} N values cannot pair with {len(self.m)} M values")
        return list(zip(self.m, self.n))

    def policy_specs(self) -> list[PolicySpec]:
        return [
            PolicySpec.parse(p, initial_offset=self.initial_offset, sink_size=self.sink_size)
            for p in self.policies
        ]

    def task_params(self) -> TaskParams:
        return TaskParams(
            kind=self.task, seq_len=self.seq_len, chunk_size=self.chunk, heads=self.heads,
            head_dim=self.head_dim, n_distinguished=self.n_distinguished, mass=self.mass,
        )

    def layer_config(self, policy: PolicySpec, m: int, n: int) -> AttendreConfig:
        return AttendreConfig(
            kv_size=m, q_size=n, top_k=self.k, chunk_size=self.chunk, policy=policy,
            heads=self.heads, head_dim=self.head_dim, causal=self.causal,
        )

    def validate(self) -> "SweepConfig":
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.policies or not self.m:
            raise ConfigError("need at least one policy and one M value")
        specs = self.policy_specs()
        for m, n in self.pairs():
            if not (n == 0 or n < m):
                raise ConfigError(f"N={n} must be 0 or smaller than M={m}")
            for spec in specs:
                self.layer_config(spec, m, n)
        self.task_params()
        return self


_INT_TUPLES = {"m"}
_STR_TUPLES = {"policies"}


def _split(text: str) -> list[str]:
    return [t for t in (s.strip() for s in text.replace(",", " ").split()) if t]


def _coerce(name: str, raw) -> object:
    """Convert a text or CLI value to the type of field ``name``."""
    default = SweepConfig.__dataclass_fields__[name].default
    try:
        if name in _STR_TUPLES:
            items = _split(raw) if isinstance(raw, str) else [s for r in raw for s in _split(r)]
            return tuple(items)
        if name in _INT_TUPLES:
            items = _split(raw) if isinstance(raw, str) else [s for r in raw for s in _split(str(r))]
            return tuple(int(x) for x in items)
        if name == "n":
            items = _split(raw) if isinstance(raw, str) else [s for r in raw for s in _split(str(r))]
            if items == ["half"]:
                return "half"
            return tuple(int(x) for x in items)
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            low = str(raw).strip().lower()
            if low not in {"true", "false", "1", "0", "yes", "no"}:
                raise ValueError(raw)
            return low in {"true", "1", "yes"}
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw).strip()
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config_text(text: str, base: Optional[SweepConfig] = None) -> SweepConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    known = {f.name for f in fields(SweepConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[key] = _coerce(key, value)
    return replace(base or SweepConfig(), **updates)


def load_config(path, overrides: Optional[dict] = None) -> SweepConfig:
    """Read a config file (or defaults when ``path`` is None) and apply overrides."""
    cfg = SweepConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        cfg = parse_config_text(text, cfg)
    if overrides:
        cfg = replace(cfg, **{k: _coerce(k, v) for k, v in overrides.items() if v is not None})
    return cfg.validate()


def dump_config(cfg: SweepConfig) -> str:
    lines = [f"# {CSV_SCHEMA} sweep configuration"]
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# sweep
# --------------------------------------------------------------------------

def trial_seed(seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([seed, trial]).generate_state(1)[0])


def run_cell(cfg: SweepConfig, policy: PolicySpec, m: int, n: int) -> dict:
    layer_cfg = cfg.layer_config(policy, m, n)
    params = cfg.task_params()
    results = [
        run_trial(generate_task(params, trial_seed(cfg.seed, t)), layer_cfg)
        for t in range(cfg.trials)
    ]
    return {
        "policy": policy.label,
        "M": m,
        "N": n,
        "K": cfg.k,
        "S": cfg.chunk,
        "task": params.kind.value,
        "trials": cfg.trials,
        "retention_rate": sum(r.retained for r in results) / len(results),
        "final_attention_mass": float(np.mean([r.attention_mass for r in results])),
        "sim_ops": sum(r.similarity_ops for r in results),
        "evictions": sum(r.evictions for r in results),
        "within_bounds": all(r.within_bounds for r in results),
    }


def run_sweep(cfg: SweepConfig) -> list[dict]:
    """One row per (policy, M, N) cell, sorted by policy label, M, N."""
    cfg.validate()
    rows = [
        run_cell(cfg, spec, m, n)
        for spec in cfg.policy_specs()
        for m, n in cfg.pairs()
    ]
    return sorted(rows, key=lambda r: (r["policy"], r["M"], r["N"]))


def format_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    buf.write(f"# {CSV_SCHEMA}; {METRIC_NOTE}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([
            f"{r[c]:.6f}" if c in ("retention_rate", "final_attention_mass") else r[c]
            for c in CSV_COLUMNS
        ])
    return buf.getvalue()


def write_report(rows: Sequence[dict], cfg: SweepConfig, path) -> tuple[Path, Path]:
    """Write the CSV and a JSON summary next to it; returns both paths."""
    csv_path = Path(path)
    json_path = csv_path.with_suffix(".json")
    summary = {
        "schema": CSV_SCHEMA,
        "note": METRIC_NOTE,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()},
        "rows": [{k: r[k] for k in CSV_COLUMNS + ["within_bounds"]} for r in rows],
    }
    for target, body in ((csv_path, format_csv(rows)),
                         (json_path, json.dumps(summary, indent=2, sort_keys=True) + "\n")):
        try:
            if target.parent != Path(""):
                target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(body)
        except OSError as exc:
            raise OSError(f"cannot write {target}: {exc.strerror or exc}") from exc
    return csv_path, json_path


def run_trace(cfg: SweepConfig, sink=None) -> TraceLog:
    """Replay the first sweep cell's first trial with event logging on."""
    cfg.validate()
    spec = cfg.policy_specs()[0]
    m, n = cfg.pairs()[0]
    log = TraceLog(sink)
    run_trial(generate_task(cfg.task_params(), trial_seed(cfg.seed, 0)),
              cfg.layer_config(spec, m, n), trace=log)
    return log
