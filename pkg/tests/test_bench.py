import json
import math

import numpy as np
import pytest

from attendre import cli
from attendre.bench import (
    CSV_COLUMNS,
    SweepConfig,
    TaskKind,
    TaskParams,
    dump_config,
    format_csv,
    generate_task,
    load_config,
    oracle_mass,
    parse_config_text,
    run_sweep,
    run_trace,
)
from attendre.errors import ConfigError


def small(**kw):
    base = dict(policies=("fifo", "lra_sum"), trials=3, seq_len=48)
    base.update(kw)
    return SweepConfig(**base)


# -- tasks --------------------------------------------------------------------------

def test_task_is_deterministic_under_seed():
    a = generate_task(TaskParams(), 7)
    b = generate_task(TaskParams(), 7)
    c = generate_task(TaskParams(), 8)
    for name in ("queries", "keys", "values"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.keys.tobytes() != c.keys.tobytes()


@pytest.mark.parametrize("causal", [False, True])
@pytest.mark.parametrize("heads", [1, 2])
def test_needle_mass_per_chunk_at_least_planted(causal, heads):
    params = TaskParams(mass=0.8, heads=heads, seq_len=128, chunk_size=4)
    for seed in range(5):
        task = generate_task(params, seed)
        mass = oracle_mass(task, causal=causal)
        per_chunk = mass.reshape(-1, 4).mean(axis=1)
        assert per_chunk.min() >= 0.8
        assert mass.min() >= 0.8


def test_question_first_layout():
    task = generate_task(TaskParams(kind="question_first", seq_len=40), 0)
    assert task.distinguished.tolist() == [0, 1]
    assert task.probes.tolist() == [39]
    assert oracle_mass(task)[39] >= 0.8
    assert oracle_mass(task)[:39].max() < 0.8


def test_short_sequence_gives_single_padded_chunk():
    task = generate_task(TaskParams(seq_len=3, chunk_size=4, n_distinguished=1), 0)
    assert len(task.chunks) == 1
    assert task.chunks[0].valid.tolist() == [True, True, True, False]


@pytest.mark.parametrize("kw", [dict(mass=1.0), dict(seq_len=0), dict(n_distinguished=5, chunk_size=4),
                                dict(kind="haystack"), dict(head_dim=1)])
def test_invalid_task_params(kw):
    with pytest.raises(ConfigError):
        TaskParams(**kw)


# -- sweeps -------------------------------------------------------------------------

def rows_by_policy(rows):
    return {r["policy"]: r for r in rows}


def test_fifo_loses_needle_attention_policy_keeps_it():
    rows = rows_by_policy(run_sweep(small(m=(16,), policies=("fifo", "lra_sum", "lfa:0", "lru"))))
    assert rows["fifo"]["retention_rate"] == 0.0
    assert rows["lra_sum"]["retention_rate"] == 1.0
    assert rows["lfa:0"]["retention_rate"] == 1.0
    # with K >= M every entry is "used" each step, so LRU falls back to age order
    assert rows["lru"]["retention_rate"] == 0.0


def test_large_memory_retains_everything():
    rows = run_sweep(small(m=(64,), seq_len=48, policies=("fifo", "lru", "lra_last", "lfa:0.001")))
    assert all(r["retention_rate"] == 1.0 for r in rows)
    assert all(r["evictions"] == 0 for r in rows)


def test_sweep_rows_cover_grid_and_respect_bounds():
    cfg = small(m=(8, 16), n=(0, 8), trials=2)
    rows = run_sweep(cfg)
    assert len(rows) == len(cfg.policies) * 2
    assert {(r["M"], r["N"]) for r in rows} == {(8, 0), (16, 8)}
    assert all(r["within_bounds"] for r in rows)
    assert all(0.0 <= r["retention_rate"] <= 1.0 for r in rows)


def test_half_rule_pairs():
    assert SweepConfig(m=(16, 32), n="half").pairs() == [(16, 8), (32, 16)]
    assert SweepConfig(m=(16, 32), n=(4,)).pairs() == [(16, 4), (32, 4)]
    with pytest.raises(ConfigError):
        SweepConfig(m=(16, 32), n=(1, 2, 3)).pairs()


def test_sweep_is_deterministic():
    cfg = small(trials=2)
    assert format_csv(run_sweep(cfg)) == format_csv(run_sweep(cfg))


def test_csv_layout():
    text = format_csv(run_sweep(small(trials=1)))
    lines = text.splitlines()
    assert lines[0].startswith("# attendre-sweep-csv/1")
    assert "not exact-match" in lines[0]
    assert lines[1].split(",") == CSV_COLUMNS
    assert len(lines) == 2 + 2


# -- config ------------------------------------------------------------------------

def test_parse_config_text():
    cfg = parse_config_text("""
        # comment
        policies = fifo, lfa:0.001
        m = 16 32
        n = half
        seed = 9
        causal = true
    """)
    assert cfg.policies == ("fifo", "lfa:0.001")
    assert cfg.m == (16, 32) and cfg.n == "half" and cfg.seed == 9 and cfg.causal is True


@pytest.mark.parametrize("text", ["bogus = 1", "m = x", "trials", "causal = maybe"])
def test_parse_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("seed = 3\nk = 8\n")
    cfg = load_config(path, {"seed": 11, "k": None})
    assert cfg.seed == 11 and cfg.k == 8


def test_dump_config_round_trips():
    cfg = SweepConfig(m=(8, 16), n="half", policies=("lru", "sink:2"))
    assert parse_config_text(dump_config(cfg)) == cfg


def test_validate_rejects_n_not_below_m():
    with pytest.raises(ConfigError):
        load_config(None, {"m": ["8"], "n": ["8"]})


def test_trace_emits_memory_events():
    log = run_trace(small(policies=("lra_sum",), seq_len=24))
    events = [json.loads(line) for line in log.lines]
    kinds = {e["event"] for e in events}
    assert {"insert", "evict", "retrieve"} <= kinds
    assert all({"step", "positions", "scores"} <= e.keys() for e in events)


# -- CLI ---------------------------------------------------------------------------

def test_cli_sweep_writes_identical_csv(tmp_path, capsys):
    outs = []
    for i in range(2):
        out = tmp_path / f"run{i}.csv"
        assert cli.main(["sweep", "--policy", "fifo,lra_sum", "--trials", "2", "--seq-len", "32",
                         "--seed", "4", "--out", str(out)]) == 0
        outs.append(out.read_bytes())
        assert json.loads(out.with_suffix(".json").read_text())["schema"] == "attendre-sweep-csv/1"
    assert outs[0] == outs[1]
    assert "not exact-match" in capsys.readouterr().out


def test_cli_reads_config_file(tmp_path):
    cfg = tmp_path / "sweep.cfg"
    out = tmp_path / "o.csv"
    cfg.write_text(f"policies = fifo\nm = 8\ntrials = 1\nseq_len = 16\nout = {out}\n")
    assert cli.main(["sweep", "--config", str(cfg)]) == 0
    assert len(out.read_text().splitlines()) == 3


def test_cli_config_error_exit_code(capsys):
    assert cli.main(["sweep", "--policy", "nonsense"]) == 2
    assert "config error" in capsys.readouterr().err


def test_cli_missing_config_file(tmp_path, capsys):
    assert cli.main(["sweep", "--config", str(tmp_path / "missing.cfg")]) == 1
    assert "missing.cfg" in capsys.readouterr().err


def test_cli_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    rc = cli.main(["sweep", "--policy", "fifo", "--trials", "1", "--seq-len", "8",
                   "--out", str(blocker / "out.csv")])
    assert rc == 1
    assert str(blocker) in capsys.readouterr().err


def test_cli_dump_config(capsys):
    assert cli.main(["sweep", "--dump-config", "--k", "32"]) == 0
    text = capsys.readouterr().out
    assert "k = 32" in text and "policies = fifo" in text


def test_cli_trace(capsys):
    assert cli.main(["trace", "--policy", "lfa:0.001", "--seq-len", "20", "--trials", "1"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines and all(json.loads(l)["event"] in {"insert", "evict", "retrieve"} for l in lines)
