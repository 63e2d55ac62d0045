"""Entry-count formulas, instrumentation agreement, and bench plumbing."""

import csv

import pytest

from vptr.bench import (
    BENCH_CSV_HEADER,
    bench_walltime,
    count_attention_entries,
    instrumented_entries,
    time_regimes,
    write_bench_csv,
)


def test_reference_counts():
    # T=10, 8x8 grid, 4x4 windows: P = 4
    assert count_attention_entries("full-joint", 10, 8, 8, 4) == 409600
    assert count_attention_entries("factorized", 10, 8, 8, 4) == 16640
    assert count_attention_entries("factorized-spatial", 10, 8, 8, 4) == 10240
    assert count_attention_entries("factorized-temporal", 10, 8, 8, 4) == 6400
    ratio = 409600 / 16640
    assert abs(ratio - 24.615384615384617) < 1e-12


def test_feda_count():
    # P patches, each attending over all T*K^2 tokens jointly
    assert count_attention_entries("feda", 10, 8, 8, 4) == 4 * (10 * 16) ** 2


def test_single_frame_full_window_degenerates_to_full():
    full = count_attention_entries("full-joint", 1, 4, 4, 4)
    spatial = count_attention_entries("factorized-spatial", 1, 4, 4, 4)
    assert full == spatial == 256


def test_count_validation():
    with pytest.raises(ValueError):
        count_attention_entries("warp", 2, 4, 4, 2)
    with pytest.raises(ValueError):
        count_attention_entries("full-joint", 2, 6, 6, 4)
    with pytest.raises(ValueError):
        count_attention_entries("full-joint", 0, 4, 4, 2)


@pytest.mark.parametrize("variant", ["full-joint", "factorized", "feda"])
@pytest.mark.parametrize("size", [(1, 4, 4, 2), (2, 4, 4, 2), (3, 4, 8, 2),
                                  (2, 8, 8, 4)])
def test_instrumented_forward_matches_formula(variant, size):
    t, h, w, k = size
    assert instrumented_entries(variant, t, h, w, k) == \
        count_attention_entries(variant, t, h, w, k)


def test_bench_walltime_records():
    recs = bench_walltime("factorized", [(2, 4, 4, 2), (3, 4, 4, 2)],
                          repeats=3, d_model=8, heads=2)
    assert [r.t_frames for r in recs] == [2, 3]
    for r in recs:
        assert r.variant == "factorized"
        assert r.wall_ns > 0
        assert r.repeats == 3
        assert r.allocation_free is False
        assert r.low_confidence is False
        assert r.entries == count_attention_entries(
            "factorized", r.t_frames, r.height, r.width, r.window)


def test_single_repeat_flagged_low_confidence():
    (rec,) = bench_walltime("full-joint", [(2, 4, 4, 2)], repeats=1,
                            d_model=8, heads=2)
    assert rec.low_confidence is True


def test_bench_rejects_bad_repeats():
    with pytest.raises(ValueError):
        bench_walltime("factorized", [(2, 4, 4, 2)], repeats=0)


def test_bench_csv_schema(tmp_path):
    recs = bench_walltime("feda", [(2, 4, 4, 2)], repeats=1,
                          d_model=8, heads=2)
    path = tmp_path / "bench.csv"
    write_bench_csv(path, recs)
    lines = path.read_text().splitlines()
    assert lines[0] == ("variant,t_frames,height,width,window,d_model,"
                        "heads,entries,wall_ns,repeats,allocation_free,"
                        "low_confidence")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    assert rows[0]["variant"] == "feda"
    assert rows[0]["allocation_free"] == "false"
    assert rows[0]["low_confidence"] == "true"
    assert int(rows[0]["entries"]) == recs[0].entries
    assert list(rows[0]) == list(BENCH_CSV_HEADER)


def test_time_regimes_reports_medians():
    ticks = {"n": 0}

    def fast():
        ticks["n"] += 1

    out = time_regimes({"a": fast, "b": fast}, repeats=3)
    assert set(out) == {"a", "b"}
    assert all(v >= 0 for v in out.values())
    # warm-up plus three timed runs per runner
    assert ticks["n"] == 8
    with pytest.raises(ValueError):
        time_regimes({"a": fast}, repeats=0)
