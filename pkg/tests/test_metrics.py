import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marl_reach import kvfile
from marl_reach.errors import ContractViolation
from marl_reach.metrics import (
    CURVES_FILE,
    CsvSink,
    EpisodeRecord,
    emit_plot_data,
    log_episode,
    moving_average,
    read_records,
    write_manifest,
)


def write_run(path, code, records, spacing=None, total=None):
    path.mkdir()
    with CsvSink(path / CURVES_FILE, EpisodeRecord) as sink:
        for r in records:
            log_episode(r, sink)
    items = {"scenario": code}
    if spacing:
        items.update(rollout_transitions=spacing, steps_done=total)
    write_manifest(path, items)


def rec(step, agent=0, idx=0, score=-1.5, length=10, reason="timeout"):
    return EpisodeRecord(step, agent, idx, score, length, reason)


def test_moving_average_window_one_is_identity():
    x = [3.0, -1.0, 2.5]
    assert moving_average(x, 1).tolist() == x


def test_moving_average_constant_and_hand_value():
    assert np.allclose(moving_average(np.full(10, 4.2), 3), 4.2, rtol=0, atol=1e-12)
    assert moving_average([0.0, 10.0], 2).tolist() == [0.0, 5.0]


def test_moving_average_trailing_mean_oracle():
    x = np.random.default_rng(0).normal(size=50)
    w = 7
    expected = [np.mean(x[max(0, i - w + 1):i + 1]) for i in range(50)]
    assert np.allclose(moving_average(x, w), expected, atol=1e-12)


def test_moving_average_rejects_zero_window():
    with pytest.raises(ContractViolation):
        moving_average([1.0], 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40), st.integers(1, 10), st.floats(-1e3, 1e3))
def test_moving_average_translation_equivariant(xs, w, c):
    a = moving_average(np.asarray(xs) + c, w)
    b = moving_average(xs, w) + c
    assert np.allclose(a, b, atol=1e-8)


def test_record_round_trip(tmp_path):
    records = [rec(8, 0, 0, -1234.5678901234567, 1200), rec(16, 1, 0, 987.25, 17, "contact"),
               rec(24, 0, 1, -3.0, 5)]
    with CsvSink(tmp_path / "c.csv", EpisodeRecord) as sink:
        for r in records:
            log_episode(r, sink)
    assert read_records(tmp_path / "c.csv") == records
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "global_step,agent_id,episode_index,score,length,terminal_reason"
    assert len(lines) == 4


def test_sink_flushes_each_row(tmp_path):
    sink = CsvSink(tmp_path / "c.csv", EpisodeRecord)
    sink.write(rec(1))
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 2
    sink.close()


def test_sink_resume_truncates(tmp_path):
    with CsvSink(tmp_path / "c.csv", EpisodeRecord) as sink:
        for i in range(5):
            sink.write(rec(i))
    with CsvSink(tmp_path / "c.csv", EpisodeRecord, keep_rows=2) as sink:
        sink.write(rec(99))
    assert [r.global_step for r in read_records(tmp_path / "c.csv")] == [0, 1, 99]


def test_sink_io_failure_raises(tmp_path):
    sink = CsvSink(tmp_path / "c.csv", EpisodeRecord)
    sink.close()
    with pytest.raises(ValueError):
        sink.write(rec(1))


def test_plot_single_run(tmp_path):
    write_run(tmp_path / "r", "base", [rec(8, score=1.0), rec(16, score=3.0)], 8, 16)
    out = tmp_path / "t.csv"
    assert emit_plot_data([tmp_path / "r"], out, window=2) == []
    lines = out.read_text().splitlines()
    assert lines == ["step,base", "8,1.0", "16,2.0"]


def test_plot_thirteen_runs(tmp_path):
    codes = ["base", "IF5", "IF15", "IF25", "IV5", "IV15", "IV25",
             "OF5", "OF15", "OF25", "OV5", "OV15", "OV25"]
    runs = []
    for k, code in enumerate(codes):
        write_run(tmp_path / code, code, [rec(10, score=k), rec(20, score=k + 1)], 10, 20)
        runs.append(tmp_path / code)
    emit_plot_data(runs, tmp_path / "table.csv", window=5)
    header = (tmp_path / "table.csv").read_text().splitlines()[0].split(",")
    assert len(header) == 14 and header[0] == "step" and header[1:] == codes


def test_plot_mismatched_grids_resample(tmp_path):
    write_run(tmp_path / "a", "base", [rec(s) for s in (10, 20, 30, 40)], 10, 40)
    write_run(tmp_path / "b", "IF5", [rec(s) for s in (20, 40)], 20, 40)
    warnings = emit_plot_data([tmp_path / "a", tmp_path / "b"], tmp_path / "t.csv")
    assert warnings
    steps = [ln.split(",")[0] for ln in (tmp_path / "t.csv").read_text().splitlines()[1:]]
    assert steps == ["20", "40"]
    assert (tmp_path / "t.csv.warnings").exists()


def test_plot_empty_run_list(tmp_path):
    with pytest.raises(ContractViolation):
        emit_plot_data([], tmp_path / "t.csv")
    assert not (tmp_path / "t.csv").exists()


def test_plot_is_byte_reproducible(tmp_path):
    write_run(tmp_path / "r", "base", [rec(s, score=s * 0.1) for s in range(8, 200, 8)], 32, 192)
    emit_plot_data([tmp_path / "r"], tmp_path / "a.csv", window=3)
    emit_plot_data([tmp_path / "r"], tmp_path / "b.csv", window=3)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_kvfile_round_trip(tmp_path):
    items = {"scenario": "IF15", "n": 30, "x": 0.1 + 0.2, "flag": True, "bounds": (0.01, -0.5)}
    kvfile.write(tmp_path / "m.txt", items)
    assert kvfile.read(tmp_path / "m.txt") == items
