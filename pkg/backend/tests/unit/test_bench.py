# backend/tests/unit/test_bench.py
# Unit tests for the runtime benchmark

import itertools
import re

import pytest
from bench import bench, run_benchmarks
from model_store import build_model

pytestmark = pytest.mark.unit

RECORD = re.compile(r"^spf=\S+ fps=\S+ warmup=\d+ timed=\d+ threads=\d+$")


@pytest.fixture
def bench_model(tiny_config):
    return build_model(tiny_config, ["a", "b"], seed=0)


def scripted_clock(*readings):
    values = iter(readings)
    return lambda: next(values)


class TestBench:
    def test_amortizes_recurrent_pass_over_window(self, bench_model):
        # Backbone 0 -> 1.0 s, then 8 stack passes (32 frames / T=4) take 0.32 s
        clock = scripted_clock(0.0, 1.0, 5.0, 5.32)

        report = bench(bench_model, warmup=0, timed=32, clock=clock)

        stack_per_frame = 0.32 / 8 / 4
        assert report.spf == pytest.approx((1.0 + 32 * stack_per_frame) / 32)
        assert report.fps == pytest.approx(32 / 1.32)

    def test_fps_is_reciprocal_of_spf(self, bench_model):
        report = bench(bench_model, warmup=2, timed=8)

        assert report.spf > 0
        assert report.fps * report.spf == pytest.approx(1.0)
        assert (report.warmup_frames, report.timed_frames, report.threads) == (2, 8, 1)
        assert (report.input_height, report.input_width) == (16, 16)

    def test_uses_perf_counter_by_default(self, bench_model, mocker):
        counter = mocker.patch("bench.time.perf_counter", side_effect=itertools.count(0.0, 0.5))

        report = bench(bench_model, warmup=0, timed=4)

        assert counter.call_count == 4
        assert report.spf == pytest.approx((0.5 + 4 * 0.5 / 1 / 4) / 4)

    def test_record_line_format(self, bench_model):
        record = bench(bench_model, warmup=0, timed=4).to_record()

        assert RECORD.match(record)
        assert "\n" not in record

    def test_text_carries_reference_and_method(self, bench_model):
        text = bench(bench_model, warmup=0, timed=4).to_text()
        assert "Seconds per frame" in text
        assert "0.0049 SPF" in text
        assert "I/O and preprocessing excluded" in text

    @pytest.mark.parametrize(
        "kwargs", [{"timed": 0}, {"warmup": -1}, {"threads": 0}]
    )
    def test_invalid_arguments(self, bench_model, kwargs):
        with pytest.raises(ValueError):
            bench(bench_model, **kwargs)


def test_threads_add_a_second_report(bench_model):
    reports = run_benchmarks(bench_model, warmup=1, timed=4, threads=2)

    assert [r.threads for r in reports] == [1, 2]
    assert all(r.fps > 0 for r in reports)


def test_single_thread_gives_one_report(bench_model):
    assert len(run_benchmarks(bench_model, warmup=0, timed=4, threads=1)) == 1
