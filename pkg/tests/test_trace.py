import pytest

from sllmsim.trace import (
    TraceError,
    TraceGenSpec,
    TraceRecord,
    generate_trace,
    load_trace,
    parse_trace_line,
    write_trace,
)


def test_parse_trace_line():
    rec = parse_trace_line("1500 req-7 llama 32 128", 1)
    assert rec == TraceRecord(1500, "req-7", "llama", 32, 128)
    assert rec.arrival_s == pytest.approx(1.5)


def test_parse_trace_line_errors():
    with pytest.raises(TraceError, match="line 3"):
        parse_trace_line("100 r1 m 5", 3)  # missing out_tokens
    with pytest.raises(TraceError):
        parse_trace_line("abc r1 m 5 5", 1)
    with pytest.raises(TraceError):
        parse_trace_line("-5 r1 m 5 5", 1)
    with pytest.raises(TraceError):
        parse_trace_line("0 r1 m -1 5", 1)


def test_load_trace_round_trip(tmp_path):
    records = [
        TraceRecord(0, "a", "m1", 8, 16),
        TraceRecord(250, "b", "m2", 4, 99),
        TraceRecord(250, "c", "m1", 0, 0),
    ]
    path = tmp_path / "trace.txt"
    write_trace(records, path)
    assert load_trace(path) == records


def test_load_trace_skips_comments_and_blanks(tmp_path):
    path = tmp_path / "trace.txt"
    path.write_text("# header\n\n0 a m 1 2\n   \n5 b m 3 4\n")
    records = load_trace(path)
    assert [r.request_id for r in records] == ["a", "b"]


def test_load_trace_rejects_duplicate_ids(tmp_path):
    path = tmp_path / "trace.txt"
    path.write_text("0 a m 1 2\n5 a m 3 4\n")
    with pytest.raises(TraceError, match="duplicate"):
        load_trace(path)


def test_load_trace_sorts_unsorted_arrivals_with_warning(tmp_path, caplog):
    path = tmp_path / "trace.txt"
    path.write_text("500 late m 1 2\n0 early m 1 2\n")
    with caplog.at_level("WARNING", logger="sllmsim.trace"):
        records = load_trace(path)
    assert [r.request_id for r in records] == ["early", "late"]
    assert any("non-monotone" in message for message in caplog.messages)


def test_generate_trace_is_deterministic():
    spec = TraceGenSpec(duration_s=30.0, arrival_rates={"m1": 0.5, "m2": 0.2}, seed=7)
    a = generate_trace(spec)
    b = generate_trace(spec)
    assert a == b
    assert a, "expected some arrivals in 30s at these rates"
    assert generate_trace(TraceGenSpec(30.0, {"m1": 0.5, "m2": 0.2}, seed=8)) != a


def test_generate_trace_respects_spec():
    spec = TraceGenSpec(
        duration_s=60.0,
        arrival_rates={"m1": 1.0, "m2": 0.5, "idle": 0.0},
        input_tokens=(4, 8),
        output_tokens=(16, 32),
        seed=3,
    )
    records = generate_trace(spec)
    assert {r.model_id for r in records} <= {"m1", "m2"}
    ids = [r.request_id for r in records]
    assert len(set(ids)) == len(ids)
    arrivals = [r.arrival_ms for r in records]
    assert arrivals == sorted(arrivals)
    assert all(0 <= r.arrival_ms <= 60_000 for r in records)
    assert all(4 <= r.input_token_count <= 8 for r in records)
    assert all(16 <= r.output_token_count <= 32 for r in records)


def test_generate_trace_round_trips_through_a_file(tmp_path):
    spec = TraceGenSpec(duration_s=20.0, arrival_rates={"m": 1.0}, seed=5)
    records = generate_trace(spec)
    path = tmp_path / "gen.txt"
    write_trace(records, path)
    assert load_trace(path) == records


def test_trace_gen_spec_validation():
    with pytest.raises(ValueError):
        TraceGenSpec(duration_s=-1.0, arrival_rates={"m": 1.0})
    with pytest.raises(ValueError):
        TraceGenSpec(duration_s=1.0, arrival_rates={"m": -0.1})
    with pytest.raises(ValueError):
        TraceGenSpec(duration_s=1.0, arrival_rates={"m": 1.0}, input_tokens=(5, 2))
