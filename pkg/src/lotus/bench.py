"""Workload driver for the three in-transit processing scenarios plus a baseline.

Drives N publisher and M subscriber sessions against a broker (embedded on
loopback by default), installs the scenario's builtin function via FSUB
(baseline: plain SUBSCRIBE), and reports delivery counts, processing counters,
byte ratios, and publish-to-delivery latency percentiles. Latency is measured
with one process clock: the driver hosts both the sending and receiving ends.

Workloads are constructed, not sampled: for a given (config, seed) the byte
stream is identical run to run, and the filter scenario hits its 79% drop
ratio exactly.
"""

from __future__ import annotations

import argparse
import csv
import gc
import json
import random
import statistics
import sys
import threading
import time
import urllib.request
from dataclasses import dataclass
from typing import Mapping

from .client import LotusClient
from .errors import BrokerUnreachable, EmptySamples, InvalidConfig, QuiescenceTimeout
from .functions import BuiltinExecutor, FunctionSpec
from .geo import Location
from .node import LotusNode
from .protocol import Delivery
from .server import BrokerServer

SCENARIOS = ("baseline", "filter", "transform", "extract")

FILTER_THRESHOLD = 30.0
FILTER_DROP_PERCENT = 79
TRANSFORM_ROWS = 10
EXTRACT_EXTRA_KEYS = 100

# Aggregate publish rate the driver paces to when no explicit per-publisher
# rate is given. Keeps the loopback pipeline well under saturation so the
# reported latencies measure transit, not queueing.
DEFAULT_AGGREGATE_HZ = 75.0

_BERLIN = Location(52.5200, 13.4050)


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    publishers: int = 50
    subscribers: int = 50
    messages_per_publisher: int = 100
    seed: int = 42
    broker: str | None = None  # "host:port"; None runs an embedded broker on loopback
    mgmt: str | None = None  # management address for metrics; filled in automatically when embedded
    warmup_messages: int = 100
    rate_hz: float | None = None  # per-publisher send rate; None paces to DEFAULT_AGGREGATE_HZ overall
    quiescence_s: float = 2.0
    quiescence_timeout_s: float = 60.0

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise InvalidConfig(f"scenario must be one of {SCENARIOS}")
        if min(self.publishers, self.subscribers, self.messages_per_publisher) <= 0:
            raise InvalidConfig("publishers, subscribers and messages_per_publisher must be positive")
        if self.publishers > 999 or self.messages_per_publisher > 9999:
            raise InvalidConfig("marker format supports at most 999 publishers and 9999 messages each")
        if self.warmup_messages < 0:
            raise InvalidConfig("warmup_messages must be >= 0")
        if self.rate_hz is not None and self.rate_hz <= 0:
            raise InvalidConfig("rate_hz must be positive")
        if self.broker is not None and self.mgmt is None:
            raise InvalidConfig("an external broker needs --mgmt for the metrics endpoint")

    @property
    def per_publisher_hz(self) -> float:
        if self.rate_hz is not None:
            return self.rate_hz
        return DEFAULT_AGGREGATE_HZ / self.publishers

    @property
    def topic(self) -> str:
        return f"bench/{self.scenario}"

    @property
    def total_messages(self) -> int:
        return self.publishers * self.messages_per_publisher


@dataclass(frozen=True)
class WorkItem:
    publisher: int
    topic: str
    payload: bytes
    marker: str
    forwarded: bool  # whether the scenario's function will forward this message
    nrows: int = 0


def _below_pattern(total: int) -> list[bool]:
    """Spread exactly floor(total * 79%) below-threshold messages evenly."""
    p = FILTER_DROP_PERCENT
    return [(g + 1) * p // 100 > g * p // 100 for g in range(total)]


def _marker(phase: str, pub: int, seq: int) -> str:
    return f"{phase}{pub:03d}{seq:04d}"


def _weather_payload(rng: random.Random, marker: str, below: bool) -> bytes:
    # Value bands keep a 0.5-degree guard around the threshold so 2-decimal
    # rounding can never flip a message to the other side.
    if below:
        temperature = round(10.0 + rng.random() * 19.5, 2)
    else:
        temperature = round(FILTER_THRESHOLD + 0.5 + rng.random() * 14.0, 2)
    wind = round(rng.random() * 25.0, 2)
    return json.dumps({"temperature": temperature, "wind": wind, "m": marker}, separators=(",", ":")).encode()


def _rows_payload(rng: random.Random, marker: str) -> bytes:
    rows = [
        {
            "m": marker,
            "row": i,
            "a": round(rng.random() * 100.0, 3),
            "b": round(rng.random() * 100.0, 3),
            "c": round(rng.random() * 100.0, 3),
        }
        for i in range(TRANSFORM_ROWS)
    ]
    return json.dumps(rows, separators=(",", ":")).encode()


def _wide_payload(rng: random.Random, marker: str) -> bytes:
    obj = {"k0": marker}
    for i in range(1, EXTRACT_EXTRA_KEYS + 1):
        obj[f"k{i}"] = f"{rng.getrandbits(32):08x}"
    return json.dumps(obj, separators=(",", ":")).encode()


def _build_items(cfg: ScenarioConfig, phase: str, assignments: list[tuple[int, int]]) -> list[WorkItem]:
    rng = random.Random(f"{cfg.seed}:{cfg.scenario}:{phase}")
    below = _below_pattern(len(assignments))
    items = []
    for g, (pub, seq) in enumerate(assignments):
        marker = _marker(phase, pub, seq)
        if cfg.scenario in ("baseline", "filter"):
            payload = _weather_payload(rng, marker, below[g])
            forwarded = cfg.scenario == "baseline" or not below[g]
            items.append(WorkItem(pub, cfg.topic, payload, marker, forwarded))
        elif cfg.scenario == "transform":
            items.append(WorkItem(pub, cfg.topic, _rows_payload(rng, marker), marker, True, TRANSFORM_ROWS))
        else:
            items.append(WorkItem(pub, cfg.topic, _wide_payload(rng, marker), marker, True))
    return items


def generate_workload(cfg: ScenarioConfig) -> list[WorkItem]:
    """The measured-phase messages, ordered publisher-major; deterministic in (config, seed)."""
    cfg.validate()
    assignments = [
        (pub, seq) for pub in range(cfg.publishers) for seq in range(cfg.messages_per_publisher)
    ]
    return _build_items(cfg, "m", assignments)


def warmup_workload(cfg: ScenarioConfig) -> list[WorkItem]:
    """Warmup messages, excluded from all reported statistics."""
    cfg.validate()
    assignments = [(i % cfg.publishers, i // cfg.publishers) for i in range(cfg.warmup_messages)]
    return _build_items(cfg, "w", assignments)


def scenario_function(scenario: str) -> FunctionSpec | None:
    if scenario == "filter":
        executor = BuiltinExecutor(
            "threshold_filter", {"field": "temperature", "op": ">=", "threshold": FILTER_THRESHOLD}
        )
        return FunctionSpec("bench-threshold-filter", executor)
    if scenario == "transform":
        return FunctionSpec("bench-json-to-csv", BuiltinExecutor("json_to_csv"))
    if scenario == "extract":
        return FunctionSpec("bench-extract-keys", BuiltinExecutor("extract_keys", {"keys": ["k0"]}))
    return None


def _parse_delivery(scenario: str, payload: bytes) -> tuple[str, int]:
    """Recover (marker, row count) from a delivered payload."""
    if scenario in ("baseline", "filter"):
        return json.loads(payload)["m"], 0
    if scenario == "extract":
        return json.loads(payload)["k0"], 0
    text = payload.decode("utf-8")
    lines = text.split("\n")
    m_idx = lines[0].split(",").index("m")
    rows = [line for line in lines[1:] if line]
    return rows[0].split(",")[m_idx], len(rows)


# -- statistics ----------------------------------------------------------------


@dataclass(frozen=True)
class LatencyStats:
    count: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    p99_ms: float


def _nearest_rank(sorted_samples: list[float], percentile: int) -> float:
    n = len(sorted_samples)
    rank = -(-percentile * n // 100)  # ceil without floats
    return sorted_samples[max(rank, 1) - 1]


def summarize(samples: list[float]) -> LatencyStats:
    """Mean, median, and nearest-rank p95/p99 of latency samples in ms."""
    if not samples:
        raise EmptySamples("no latency samples")
    ordered = sorted(samples)
    return LatencyStats(
        count=len(ordered),
        mean_ms=statistics.fmean(ordered),
        median_ms=statistics.median(ordered),
        p95_ms=_nearest_rank(ordered, 95),
        p99_ms=_nearest_rank(ordered, 99),
    )


# -- the run -------------------------------------------------------------------


@dataclass(frozen=True)
class RunReport:
    scenario: str
    publishers: int
    subscribers: int
    messages_per_publisher: int
    seed: int
    sent: int
    forwarded_expected: int
    forwarded: int
    delivered_total: int
    per_subscriber: tuple[int, ...]
    invocations: int
    drops: int
    failures: int
    bytes_in: int
    bytes_out: float  # mean delivered bytes per subscriber
    latency: LatencyStats | None
    duration_s: float
    violations: tuple[str, ...]

    def human_table(self) -> str:
        lat = self.latency
        lines = [
            f"scenario            {self.scenario}",
            f"publishers/subs     {self.publishers}/{self.subscribers} x {self.messages_per_publisher} msgs (seed {self.seed})",
            f"sent/forwarded      {self.sent}/{self.forwarded} (expected forwarded {self.forwarded_expected})",
            f"delivered total     {self.delivered_total} (per subscriber min {min(self.per_subscriber)}, max {max(self.per_subscriber)})",
            f"invocations         {self.invocations} (drops {self.drops}, failures {self.failures})",
            f"bytes in/out        {self.bytes_in}/{self.bytes_out:.1f} (out = mean per subscriber)",
        ]
        if lat is not None:
            lines.append(
                f"latency ms          mean {lat.mean_ms:.2f}  median {lat.median_ms:.2f}  "
                f"p95 {lat.p95_ms:.2f}  p99 {lat.p99_ms:.2f}  (n={lat.count})"
            )
        lines.append(f"duration            {self.duration_s:.1f}s")
        if self.violations:
            lines.append("VIOLATIONS:")
            lines.extend(f"  - {v}" for v in self.violations)
        return "\n".join(lines)


CSV_FIELDS = [
    "scenario", "publishers", "subscribers", "messages_per_publisher", "seed",
    "sent", "forwarded_expected", "forwarded", "delivered_total",
    "invocations", "drops", "failures", "bytes_in", "bytes_out",
    "latency_mean_ms", "latency_median_ms", "latency_p95_ms", "latency_p99_ms",
    "duration_s", "violations",
]


def csv_row(report: RunReport) -> dict:
    lat = report.latency
    return {
        "scenario": report.scenario,
        "publishers": report.publishers,
        "subscribers": report.subscribers,
        "messages_per_publisher": report.messages_per_publisher,
        "seed": report.seed,
        "sent": report.sent,
        "forwarded_expected": report.forwarded_expected,
        "forwarded": report.forwarded,
        "delivered_total": report.delivered_total,
        "invocations": report.invocations,
        "drops": report.drops,
        "failures": report.failures,
        "bytes_in": report.bytes_in,
        "bytes_out": f"{report.bytes_out:.1f}",
        "latency_mean_ms": f"{lat.mean_ms:.3f}" if lat else "",
        "latency_median_ms": f"{lat.median_ms:.3f}" if lat else "",
        "latency_p95_ms": f"{lat.p95_ms:.3f}" if lat else "",
        "latency_p99_ms": f"{lat.p99_ms:.3f}" if lat else "",
        "duration_s": f"{report.duration_s:.2f}",
        "violations": "|".join(report.violations),
    }


class _Subscriber:
    def __init__(self, run: "_Run", idx: int):
        self.run = run
        self.idx = idx
        self.count = 0
        self.bytes = 0
        self.warmup_count = 0
        self.samples: list[float] = []
        self.row_mismatches = 0
        self.parse_errors = 0
        self.unknown_markers = 0
        self.client: LotusClient | None = None

    def on_delivery(self, delivery: Delivery) -> None:
        recv_ns = time.perf_counter_ns()
        self.run.last_delivery_ns = recv_ns
        try:
            marker, nrows = _parse_delivery(self.run.cfg.scenario, delivery.payload)
        except (ValueError, KeyError, IndexError, UnicodeDecodeError):
            self.parse_errors += 1
            return
        info = self.run.sent.get(marker)
        if info is None:
            self.unknown_markers += 1
            return
        if marker[0] == "w":
            self.warmup_count += 1
            return
        send_ns, _payload_len, sent_rows = info
        self.count += 1
        self.bytes += len(delivery.payload)
        self.samples.append((recv_ns - send_ns) / 1e6)
        if self.run.cfg.scenario == "transform" and nrows != sent_rows:
            self.row_mismatches += 1


class _Run:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.sent: dict[str, tuple[int, int, int]] = {}  # marker -> (send_ns, len, nrows)
        self.last_delivery_ns = time.perf_counter_ns()
        self.subscribers = [_Subscriber(self, i) for i in range(cfg.subscribers)]
        self.publisher_clients: list[LotusClient] = []
        self.publish_errors: list[str] = []


def _fetch_metrics(mgmt: str) -> dict:
    with urllib.request.urlopen(f"http://{mgmt}/metrics", timeout=10) as resp:
        return json.loads(resp.read())


def _bridge_delta(before: Mapping, after: Mapping, key: str) -> int:
    return after.get("bridges", {}).get(key, 0) - before.get("bridges", {}).get(key, 0)


def _publisher_loop(run: _Run, client: LotusClient, items: list[WorkItem], barrier: threading.Barrier,
                    interval_s: float, offset_s: float) -> None:
    try:
        barrier.wait()
        next_t = time.perf_counter() + offset_s
        for item in items:
            now = time.perf_counter()
            if next_t > now:
                time.sleep(next_t - now)
            run.sent[item.marker] = (time.perf_counter_ns(), len(item.payload), item.nrows)
            client.publish(item.topic, item.payload)
            next_t += interval_s
    except Exception as e:  # noqa: BLE001 - surfaced as a run violation
        run.publish_errors.append(f"publisher {client.client_id}: {e}")


def _wait_quiescent(run: _Run, started: float) -> None:
    cfg = run.cfg
    while True:
        idle_s = (time.perf_counter_ns() - run.last_delivery_ns) / 1e9
        if idle_s >= cfg.quiescence_s:
            return
        if time.perf_counter() - started > cfg.quiescence_timeout_s:
            raise QuiescenceTimeout(f"deliveries still arriving after {cfg.quiescence_timeout_s}s")
        time.sleep(0.05)


def run_scenario(cfg: ScenarioConfig, node: LotusNode | None = None) -> RunReport:
    """Execute one scenario end to end and return its report.

    With no broker address configured, an embedded broker is started on
    loopback (optionally around a caller-supplied node, which keeps its
    counters inspectable after the run).
    """
    cfg.validate()
    workload = generate_workload(cfg)
    warmup = warmup_workload(cfg)
    run = _Run(cfg)

    server: BrokerServer | None = None
    if cfg.broker is None:
        server = BrokerServer(node or LotusNode(), host="127.0.0.1", port=0, mgmt_port=0)
        server.start()
        broker_addr = ("127.0.0.1", server.port)
        mgmt = f"127.0.0.1:{server.mgmt_port}"
    else:
        host, _, port = cfg.broker.rpartition(":")
        try:
            broker_addr = (host, int(port))
        except ValueError as e:
            raise InvalidConfig(f"broker address {cfg.broker!r} must be host:port") from e
        assert cfg.mgmt is not None  # enforced by validate()
        mgmt = cfg.mgmt

    started = time.perf_counter()
    try:
        spec = scenario_function(cfg.scenario)
        for sub in run.subscribers:
            sub.client = LotusClient(
                *broker_addr, client_id=f"sub-{sub.idx:03d}", location=_BERLIN, on_delivery=sub.on_delivery
            )
            if spec is None:
                sub.client.subscribe(cfg.topic)
            else:
                sub.client.function_subscribe(cfg.topic, spec)
        for p in range(cfg.publishers):
            run.publisher_clients.append(
                LotusClient(*broker_addr, client_id=f"pub-{p:03d}", location=_BERLIN)
            )

        # Message-rate garbage is acyclic and dies by refcount; with the
        # cyclic collector paused, full-GC sweeps over the growing sample
        # arrays cannot spike the measured latencies.
        gc.collect()
        gc.disable()
        try:
            # Warmup, then snapshot counters so stats cover only the measured phase.
            warmup_gap = 1.0 / (cfg.per_publisher_hz * cfg.publishers)
            for item in warmup:
                run.sent[item.marker] = (time.perf_counter_ns(), len(item.payload), item.nrows)
                run.publisher_clients[item.publisher].publish(item.topic, item.payload)
                time.sleep(warmup_gap)
            _wait_quiescent(run, time.perf_counter())
            metrics_before = _fetch_metrics(mgmt)

            measured_started = time.perf_counter()
            interval_s = 1.0 / cfg.per_publisher_hz
            barrier = threading.Barrier(cfg.publishers + 1)
            threads = []
            by_pub: dict[int, list[WorkItem]] = {}
            for item in workload:
                by_pub.setdefault(item.publisher, []).append(item)
            for p, items in by_pub.items():
                offset = interval_s * p / cfg.publishers
                t = threading.Thread(
                    target=_publisher_loop,
                    args=(run, run.publisher_clients[p], items, barrier, interval_s, offset),
                    daemon=True,
                )
                threads.append(t)
                t.start()
            barrier.wait()
            for t in threads:
                t.join()
            _wait_quiescent(run, time.perf_counter())
            metrics_after = _fetch_metrics(mgmt)
            duration_s = time.perf_counter() - measured_started
        finally:
            gc.enable()
    finally:
        for client in run.publisher_clients:
            client.close()
        for sub in run.subscribers:
            if sub.client is not None:
                sub.client.close()
        if server is not None:
            server.stop()

    report = _assemble_report(cfg, run, workload, metrics_before, metrics_after, duration_s)
    # Reclaim this run's cyclic garbage now so full-GC pauses from one run
    # cannot pollute the latency profile of the next run in this process.
    del run
    gc.collect()
    return report


def _assemble_report(cfg: ScenarioConfig, run: _Run, workload: list[WorkItem],
                     before: Mapping, after: Mapping, duration_s: float) -> RunReport:
    forwarded_expected = sum(1 for item in workload if item.forwarded)
    invocations = _bridge_delta(before, after, "invocations")
    drops = _bridge_delta(before, after, "dropped")
    failures = _bridge_delta(before, after, "failures")
    forwarded = _bridge_delta(before, after, "forwarded") if cfg.scenario != "baseline" else cfg.total_messages
    per_subscriber = tuple(sub.count for sub in run.subscribers)
    delivered_total = sum(per_subscriber)
    samples = [s for sub in run.subscribers for s in sub.samples]
    bytes_in = sum(len(item.payload) for item in workload)
    bytes_out = sum(sub.bytes for sub in run.subscribers) / max(len(run.subscribers), 1)

    violations = list(run.publish_errors)
    if cfg.scenario != "baseline" and invocations != cfg.total_messages:
        violations.append(f"invocations {invocations} != messages {cfg.total_messages}")
    if cfg.scenario == "baseline" and invocations != 0:
        violations.append(f"baseline ran {invocations} invocations")
    if forwarded != forwarded_expected:
        violations.append(f"forwarded {forwarded} != expected {forwarded_expected}")
    if delivered_total != forwarded_expected * cfg.subscribers:
        violations.append(
            f"delivered_total {delivered_total} != forwarded {forwarded_expected} x subscribers {cfg.subscribers}"
        )
    for sub in run.subscribers:
        if sub.count != forwarded_expected:
            violations.append(f"subscriber {sub.idx} delivered {sub.count} != {forwarded_expected}")
        if sub.parse_errors or sub.unknown_markers or sub.row_mismatches:
            violations.append(
                f"subscriber {sub.idx}: parse_errors={sub.parse_errors} "
                f"unknown_markers={sub.unknown_markers} row_mismatches={sub.row_mismatches}"
            )
    if cfg.scenario in ("filter", "extract") and bytes_out > bytes_in:
        violations.append(f"bytes_out {bytes_out:.0f} > bytes_in {bytes_in}")

    return RunReport(
        scenario=cfg.scenario,
        publishers=cfg.publishers,
        subscribers=cfg.subscribers,
        messages_per_publisher=cfg.messages_per_publisher,
        seed=cfg.seed,
        sent=len(workload),
        forwarded_expected=forwarded_expected,
        forwarded=forwarded,
        delivered_total=delivered_total,
        per_subscriber=per_subscriber,
        invocations=invocations,
        drops=drops,
        failures=failures,
        bytes_in=bytes_in,
        bytes_out=bytes_out,
        latency=summarize(samples) if samples else None,
        duration_s=duration_s,
        violations=tuple(violations),
    )


def overhead_table(baseline: RunReport, processed: list[RunReport]) -> str:
    """Baseline-vs-processed mean latency table (the shape of the paper's figure)."""
    assert baseline.latency is not None
    base = baseline.latency.mean_ms
    lines = [
        f"{'scenario':<12}{'baseline ms':>12}{'processed ms':>14}{'delta ms':>10}{'ratio':>8}",
        f"{'baseline':<12}{base:>12.2f}{'-':>14}{'-':>10}{'-':>8}",
    ]
    for report in processed:
        assert report.latency is not None
        mean = report.latency.mean_ms
        lines.append(
            f"{report.scenario:<12}{base:>12.2f}{mean:>14.2f}{mean - base:>10.2f}{mean / base:>8.2f}"
        )
    return "\n".join(lines)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="lotus-bench", description="Run one benchmark scenario")
    parser.add_argument("--scenario", required=True, choices=SCENARIOS)
    parser.add_argument("--publishers", type=int, default=50)
    parser.add_argument("--subscribers", type=int, default=50)
    parser.add_argument("--messages", type=int, default=100, help="messages per publisher")
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--broker", default=None, help="host:port of a running broker (default: embedded)")
    parser.add_argument("--mgmt", default=None, help="host:port of the broker's management API")
    parser.add_argument("--output", default=None, help="write a CSV row with the report")
    parser.add_argument("--warmup", type=int, default=100, help="warmup messages excluded from stats")
    parser.add_argument("--rate", type=float, default=None,
                        help=f"per-publisher send rate in Hz (default: {DEFAULT_AGGREGATE_HZ} aggregate)")
    parser.add_argument("--quiescence-timeout", type=float, default=60.0)
    args = parser.parse_args(argv)

    cfg = ScenarioConfig(
        scenario=args.scenario,
        publishers=args.publishers,
        subscribers=args.subscribers,
        messages_per_publisher=args.messages,
        seed=args.seed,
        broker=args.broker,
        mgmt=args.mgmt,
        warmup_messages=args.warmup,
        rate_hz=args.rate,
        quiescence_timeout_s=args.quiescence_timeout,
    )
    try:
        report = run_scenario(cfg)
    except (BrokerUnreachable, QuiescenceTimeout, InvalidConfig) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(report.human_table())
    if args.output:
        with open(args.output, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
            if fh.tell() == 0:
                writer.writeheader()
            writer.writerow(csv_row(report))
    return 1 if report.violations else 0


if __name__ == "__main__":
    raise SystemExit(main())
