from __future__ import annotations

import json
import random

import pytest

from lotus.bench import (
    LatencyStats,
    ScenarioConfig,
    _below_pattern,
    _parse_delivery,
    csv_row,
    generate_workload,
    overhead_table,
    run_scenario,
    scenario_function,
    summarize,
    warmup_workload,
)
from lotus.errors import EmptySamples, InvalidConfig
from lotus.functions import builtin_json_to_csv, builtin_threshold_filter, Forward
from lotus.node import LotusNode

from oracles import EXTRACT_RATIO, percentile_oracle


def small_cfg(scenario: str, **kw) -> ScenarioConfig:
    defaults = dict(
        scenario=scenario,
        publishers=2,
        subscribers=2,
        messages_per_publisher=10,
        seed=7,
        warmup_messages=4,
        rate_hz=100.0,
        quiescence_s=0.4,
        quiescence_timeout_s=30.0,
    )
    defaults.update(kw)
    return ScenarioConfig(**defaults)


# -- workload generation -----------------------------------------------------------


def test_same_seed_byte_identical():
    cfg = ScenarioConfig("filter", publishers=5, subscribers=1, messages_per_publisher=20, seed=99)
    a = generate_workload(cfg)
    b = generate_workload(cfg)
    assert a == b
    c = generate_workload(ScenarioConfig("filter", publishers=5, subscribers=1, messages_per_publisher=20, seed=100))
    assert [i.payload for i in a] != [i.payload for i in c]


def test_filter_workload_hits_79_percent_exactly():
    cfg = ScenarioConfig("filter")  # 50 x 100 = 5000
    items = generate_workload(cfg)
    below = [i for i in items if not i.forwarded]
    assert len(items) == 5000
    assert len(below) == 3950
    assert sum(1 for i in items if i.forwarded) == 1050
    spec = scenario_function("filter")
    for item in items[:200]:
        out = builtin_threshold_filter(item.payload, dict(spec.executor.config))
        assert isinstance(out, Forward) == item.forwarded


def test_below_pattern_spreads_evenly():
    assert sum(_below_pattern(100)) == 79
    assert sum(_below_pattern(5000)) == 3950
    assert sum(_below_pattern(1)) in (0, 1)
    # Every aligned 100-message slice carries exactly 79 below-threshold messages.
    pattern = _below_pattern(500)
    for start in range(0, 500, 100):
        assert sum(pattern[start : start + 100]) == 79


def test_extract_payload_ratio_matches_frozen_arithmetic():
    cfg = ScenarioConfig("extract", publishers=1, subscribers=1, messages_per_publisher=5)
    items = generate_workload(cfg)
    spec = scenario_function("extract")
    for item in items:
        assert len(item.payload) == 1709
        out = __import__("lotus.functions", fromlist=["run_builtin"]).run_builtin(
            "extract_keys", item.payload, dict(spec.executor.config)
        )
        ratio = len(out.payload) / len(item.payload)
        assert ratio == pytest.approx(EXTRACT_RATIO, rel=1e-12)
        assert ratio <= 0.02


def test_transform_workload_shape():
    cfg = ScenarioConfig("transform", publishers=1, subscribers=1, messages_per_publisher=3)
    for item in generate_workload(cfg):
        rows = json.loads(item.payload)
        assert len(rows) == 10
        assert all(len(r) == 5 for r in rows)
        out = builtin_json_to_csv(item.payload)
        assert isinstance(out, Forward)
        marker, nrows = _parse_delivery("transform", out.payload)
        assert marker == item.marker and nrows == 10


def test_markers_unique_across_phases():
    cfg = small_cfg("baseline")
    markers = [i.marker for i in generate_workload(cfg)] + [i.marker for i in warmup_workload(cfg)]
    assert len(markers) == len(set(markers))


def test_invalid_configs_rejected():
    with pytest.raises(InvalidConfig):
        ScenarioConfig("nope").validate()
    with pytest.raises(InvalidConfig):
        ScenarioConfig("filter", publishers=0).validate()
    with pytest.raises(InvalidConfig):
        ScenarioConfig("filter", broker="somewhere:1").validate()  # external needs mgmt
    with pytest.raises(InvalidConfig):
        ScenarioConfig("filter", messages_per_publisher=100000).validate()


# -- summarize -----------------------------------------------------------------------


def test_summarize_examples():
    s = summarize([1, 2, 3, 4])
    assert (s.mean_ms, s.median_ms) == (2.5, 2.5)
    single = summarize([7])
    assert (single.mean_ms, single.median_ms, single.p95_ms, single.p99_ms) == (7, 7, 7, 7)


def test_summarize_empty_raises():
    with pytest.raises(EmptySamples):
        summarize([])


def test_percentiles_match_sort_oracle():
    rng = random.Random(5150)
    samples = [rng.expovariate(0.3) for _ in range(1000)]
    s = summarize(samples)
    assert s.p95_ms == percentile_oracle(samples, 95)
    assert s.p99_ms == percentile_oracle(samples, 99)
    assert s.median_ms == pytest.approx(sorted(samples)[499] / 2 + sorted(samples)[500] / 2)


# -- end-to-end small runs --------------------------------------------------------------


def test_baseline_small_run():
    cfg = small_cfg("baseline", publishers=1, subscribers=1)
    report = run_scenario(cfg)
    assert report.violations == ()
    assert report.sent == 10
    assert report.delivered_total == 10
    assert report.per_subscriber == (10,)
    assert report.invocations == 0
    assert report.latency is not None and report.latency.count == 10


def test_filter_small_run_counts():
    node = LotusNode()
    cfg = small_cfg("filter", messages_per_publisher=100)  # 2 pubs x 100 = 200 messages
    report = run_scenario(cfg, node=node)
    assert report.violations == ()
    assert report.sent == 200
    assert report.invocations == 200
    assert report.drops == 158  # 79% of 200
    assert report.forwarded == 42
    assert report.per_subscriber == (42, 42)
    assert report.bytes_out <= report.bytes_in
    # Process-once evidence survives the run on the caller's node.
    assert node.bridges.metrics()["invocation_log_unique"] == 200 + cfg.warmup_messages


def test_transform_small_run_csv_payloads():
    report = run_scenario(small_cfg("transform"))
    assert report.violations == ()
    assert report.delivered_total == 20 * 2
    assert report.invocations == 20


def test_extract_small_run_ratio():
    report = run_scenario(small_cfg("extract"))
    assert report.violations == ()
    assert report.bytes_out / report.bytes_in == pytest.approx(EXTRACT_RATIO, rel=1e-9)


def test_determinism_of_counts_across_runs():
    cfg = small_cfg("filter")
    r1 = run_scenario(cfg)
    r2 = run_scenario(cfg)
    assert (r1.delivered_total, r1.invocations, r1.drops) == (r2.delivered_total, r2.invocations, r2.drops)


# -- reporting ----------------------------------------------------------------------------


def test_csv_row_and_table_render():
    report = run_scenario(small_cfg("baseline"))
    row = csv_row(report)
    assert row["scenario"] == "baseline"
    assert int(row["delivered_total"]) == report.delivered_total
    assert "latency ms" in report.human_table()


def test_overhead_table_shape():
    base = run_scenario(small_cfg("baseline"))
    flt = run_scenario(small_cfg("filter"))
    table = overhead_table(base, [flt])
    assert "ratio" in table.splitlines()[0]
    assert len(table.splitlines()) == 3
