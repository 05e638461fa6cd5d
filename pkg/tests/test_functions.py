from __future__ import annotations

import json
import threading
import time

import pytest

from lotus.errors import DuplicateName, InvalidConfig, UnknownFunction
from lotus.functions import (
    BuiltinExecutor,
    Drop,
    Failure,
    Forward,
    FunctionRuntime,
    FunctionSpec,
    Invocation,
    ProcessExecutor,
    builtin_extract_keys,
    builtin_json_to_csv,
    builtin_threshold_filter,
    spec_digest,
    spec_from_json,
    spec_to_json,
)
from lotus.geo import Location

from conftest import proc_command

LOC = Location(52.52, 13.405)


def inv(payload: bytes, pid: str = "pub-1") -> Invocation:
    return Invocation(pid, "a/b", payload, LOC, 123)


def identity_spec(name: str = "ident", **kw) -> FunctionSpec:
    return FunctionSpec(name, BuiltinExecutor("identity"), **kw)


def proc_spec(name: str, mode: str, *extra: str, **kw) -> FunctionSpec:
    return FunctionSpec(name, ProcessExecutor(proc_command(mode, *extra)), **kw)


@pytest.fixture
def runtime():
    rt = FunctionRuntime()
    yield rt
    for spec in rt.list():
        rt.remove(spec.name)


# -- registry ---------------------------------------------------------------------


def test_deploy_and_invoke_identity(runtime):
    fid = runtime.deploy(identity_spec())
    out = runtime.invoke(fid, inv(b"x"))
    assert out == Forward(b"x")


def test_duplicate_name_rejected(runtime):
    runtime.deploy(identity_spec())
    with pytest.raises(DuplicateName):
        runtime.deploy(identity_spec())


def test_name_freed_on_removal(runtime):
    fid = runtime.deploy(identity_spec())
    runtime.remove(fid)
    assert runtime.deploy(identity_spec()) == fid


def test_remove_then_invoke(runtime):
    fid = runtime.deploy(identity_spec())
    runtime.remove(fid)
    with pytest.raises(UnknownFunction):
        runtime.invoke(fid, inv(b"x"))


def test_remove_unknown(runtime):
    with pytest.raises(UnknownFunction):
        runtime.remove("nope")


def test_list_snapshot(runtime):
    assert runtime.list() == []
    names = {"f1", "f2", "f3"}
    for n in names:
        runtime.deploy(identity_spec(n))
    assert {s.name for s in runtime.list()} == names
    runtime.remove("f2")
    assert {s.name for s in runtime.list()} == {"f1", "f3"}


def test_remove_waits_for_in_flight(runtime):
    fid = runtime.deploy(proc_spec("slow", "sleep", "150", timeout_ms=2000))
    result: list = []

    def call():
        result.append(runtime.invoke(fid, inv(b"hello")))

    t = threading.Thread(target=call)
    t.start()
    time.sleep(0.05)  # let the invocation reach the process
    runtime.remove(fid)
    t.join(timeout=5)
    assert result == [Forward(b"hello")]


@pytest.mark.parametrize(
    "spec",
    [
        FunctionSpec("", BuiltinExecutor("identity")),
        FunctionSpec("a b", BuiltinExecutor("identity")),
        FunctionSpec("f", BuiltinExecutor("nope")),
        FunctionSpec("f", BuiltinExecutor("identity"), timeout_ms=0),
        FunctionSpec("f", BuiltinExecutor("identity"), max_concurrency=0),
        FunctionSpec("f", BuiltinExecutor("threshold_filter", {"field": "t"})),
        FunctionSpec("f", BuiltinExecutor("threshold_filter", {"field": "t", "op": "!=", "threshold": 1})),
        FunctionSpec("f", BuiltinExecutor("extract_keys", {"keys": []})),
        FunctionSpec("f", BuiltinExecutor("identity", {"extra": 1})),
        FunctionSpec("f", ProcessExecutor(())),
    ],
)
def test_invalid_specs_rejected(runtime, spec):
    with pytest.raises(InvalidConfig):
        runtime.deploy(spec)


def test_spec_json_round_trip():
    spec = FunctionSpec(
        "flt",
        BuiltinExecutor("threshold_filter", {"field": "t", "op": ">", "threshold": 30.0}),
        timeout_ms=500,
        max_concurrency=2,
    )
    assert spec_from_json(spec_to_json(spec)) == spec
    proc = proc_spec("p", "echo")
    assert spec_from_json(spec_to_json(proc)) == proc


def test_spec_digest_distinguishes_configs():
    a = FunctionSpec("f", BuiltinExecutor("extract_keys", {"keys": ["a"]}))
    b = FunctionSpec("f", BuiltinExecutor("extract_keys", {"keys": ["b"]}))
    assert spec_digest(a) != spec_digest(b)
    assert spec_digest(a) == spec_digest(FunctionSpec("f", BuiltinExecutor("extract_keys", {"keys": ["a"]})))


# -- builtins -----------------------------------------------------------------------


THRESH = {"field": "temperature", "op": ">", "threshold": 30}


def test_threshold_forward():
    payload = b'{"temperature": 35.2}'
    assert builtin_threshold_filter(payload, THRESH) == Forward(payload)


def test_threshold_drop_below():
    assert builtin_threshold_filter(b'{"temperature": 12.0}', THRESH) == Drop()


def test_threshold_missing_field_fails_closed():
    assert builtin_threshold_filter(b'{"wind": 5}', THRESH) == Drop(note="malformed")


def test_threshold_malformed_payload_fails_closed():
    assert builtin_threshold_filter(b"not json", THRESH) == Drop(note="malformed")
    assert builtin_threshold_filter(b"[1,2]", THRESH) == Drop(note="malformed")
    assert builtin_threshold_filter(b'{"temperature": true}', THRESH) == Drop(note="malformed")
    assert builtin_threshold_filter(b'{"temperature": "35"}', THRESH) == Drop(note="malformed")


@pytest.mark.parametrize(
    "op,value,expected",
    [(">", 30, False), (">=", 30, True), ("<", 30, False), ("<=", 30, True), ("<", 29.9, True), (">", 30.1, True)],
)
def test_threshold_operators(op, value, expected):
    payload = json.dumps({"temperature": value}).encode()
    out = builtin_threshold_filter(payload, {"field": "temperature", "op": op, "threshold": 30})
    assert isinstance(out, Forward) == expected


def test_json_to_csv_sorted_header():
    out = builtin_json_to_csv(b'[{"b":2,"a":1},{"a":3,"b":4}]')
    assert out == Forward(b"a,b\n1,2\n3,4\n")


def test_json_to_csv_empty_array():
    assert builtin_json_to_csv(b"[]") == Forward(b"\n")


def test_json_to_csv_quoting():
    assert builtin_json_to_csv(b'[{"a":"x,y"}]') == Forward(b'a\n"x,y"\n')
    assert builtin_json_to_csv(b'[{"a":"say \\"hi\\""}]') == Forward(b'a\n"say ""hi"""\n')
    assert builtin_json_to_csv(b'[{"a":"two\\nlines"}]') == Forward(b'a\n"two\nlines"\n')


def test_json_to_csv_missing_and_null_and_bool():
    out = builtin_json_to_csv(b'[{"a":null,"b":true},{"b":false}]')
    assert out == Forward(b"a,b\n,true\n,false\n")


def test_json_to_csv_number_rendering():
    out = builtin_json_to_csv(b'[{"i":7,"f":6.39,"g":0.1}]')
    assert out == Forward(b"f,g,i\n6.39,0.1,7\n")


def test_json_to_csv_rejects_non_array_and_nested():
    assert builtin_json_to_csv(b'{"a":1}') == Failure("malformed_response")
    assert builtin_json_to_csv(b'[{"a":{"b":1}}]') == Failure("malformed_response")
    assert builtin_json_to_csv(b'[{"a":[1]}]') == Failure("malformed_response")
    assert builtin_json_to_csv(b"garbage") == Failure("malformed_response")
    assert builtin_json_to_csv(b"[1,2]") == Failure("malformed_response")


def test_extract_keys_picks_configured_order():
    payload = json.dumps({f"k{i}": i for i in range(101)}).encode()
    out = builtin_extract_keys(payload, {"keys": ["k0"]})
    assert out == Forward(b'{"k0":0}')
    out2 = builtin_extract_keys(b'{"a":1,"b":2,"c":3}', {"keys": ["c", "a"]})
    assert out2 == Forward(b'{"c":3,"a":1}')


def test_extract_keys_none_present_drops():
    assert builtin_extract_keys(b'{"a":1}', {"keys": ["missing"]}) == Drop()


def test_extract_keys_malformed_drops():
    assert builtin_extract_keys(b"junk", {"keys": ["a"]}) == Drop(note="malformed")
    assert builtin_extract_keys(b"[1]", {"keys": ["a"]}) == Drop(note="malformed")


def test_extract_keys_size_ratio_on_wide_object():
    # The bench workload shape: k0 plus 100 extra keys, all 8-char values.
    obj = {f"k{i}": "v" * 8 for i in range(101)}
    payload = json.dumps(obj, separators=(",", ":")).encode()
    out = builtin_extract_keys(payload, {"keys": ["k0"]})
    assert isinstance(out, Forward)
    ratio = len(out.payload) / len(payload)
    assert ratio <= 0.02


def test_builtins_are_deterministic():
    for _ in range(3):
        assert builtin_json_to_csv(b'[{"a":1.5}]') == Forward(b"a\n1.5\n")
        assert builtin_threshold_filter(b'{"temperature":31}', THRESH) == Forward(b'{"temperature":31}')
        assert builtin_extract_keys(b'{"a":1,"b":2}', {"keys": ["a"]}) == Forward(b'{"a":1}')


# -- external processes ----------------------------------------------------------------


def test_process_echo_round_trip(runtime):
    fid = runtime.deploy(proc_spec("echo", "echo"))
    assert runtime.invoke(fid, inv(b"payload bytes")) == Forward(b"payload bytes")


def test_process_transform(runtime):
    fid = runtime.deploy(proc_spec("up", "upper"))
    assert runtime.invoke(fid, inv(b"shout")) == Forward(b"SHOUT")


def test_process_drop(runtime):
    fid = runtime.deploy(proc_spec("drop", "drop"))
    assert runtime.invoke(fid, inv(b"x")) == Drop()


def test_process_timeout_bounds(runtime):
    fid = runtime.deploy(proc_spec("silent", "silent", timeout_ms=50))
    start = time.perf_counter()
    out = runtime.invoke(fid, inv(b"x"))
    elapsed = time.perf_counter() - start
    assert out == Failure("timeout")
    assert 0.05 <= elapsed < 0.25


def test_process_sleeping_past_timeout(runtime):
    # Sleeps 10x the timeout; the cancel path must win well before that.
    fid = runtime.deploy(proc_spec("sleepy", "sleep", "500", timeout_ms=50))
    start = time.perf_counter()
    out = runtime.invoke(fid, inv(b"x"))
    elapsed = time.perf_counter() - start
    assert out == Failure("timeout")
    assert elapsed < 0.25  # 5x timeout


def test_process_malformed_response(runtime):
    fid = runtime.deploy(proc_spec("bad", "garbage", timeout_ms=2000))
    assert runtime.invoke(fid, inv(b"x")) == Failure("malformed_response")


def test_process_bad_field_response(runtime):
    fid = runtime.deploy(proc_spec("bad2", "badfield", timeout_ms=2000))
    assert runtime.invoke(fid, inv(b"x")) == Failure("malformed_response")


def test_process_crash_then_lazy_restart(runtime):
    fid = runtime.deploy(proc_spec("crashy", "once-crash", timeout_ms=2000))
    assert runtime.invoke(fid, inv(b"first")) == Forward(b"first")
    time.sleep(0.3)  # let the process finish exiting
    # The process is gone; the next invocation restarts it lazily.
    assert runtime.invoke(fid, inv(b"second")) == Forward(b"second")


def test_process_exit_fails_in_flight(runtime):
    fid = runtime.deploy(proc_spec("dead", "crash", timeout_ms=2000))
    out = runtime.invoke(fid, inv(b"x"))
    assert out in (Failure("crash"), Failure("timeout"))
    assert out == Failure("crash")


def test_failure_isolation_between_functions(runtime):
    crashy = runtime.deploy(proc_spec("crashy-iso", "crash", timeout_ms=500))
    ident = runtime.deploy(identity_spec("ident-iso"))
    outs = {}

    def call(name, fid, payload):
        outs[name] = runtime.invoke(fid, inv(payload))

    threads = [
        threading.Thread(target=call, args=("a", crashy, b"boom")),
        threading.Thread(target=call, args=("b", ident, b"fine")),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=5)
    assert outs["b"] == Forward(b"fine")
    assert isinstance(outs["a"], Failure)


def test_concurrency_cap_serializes(runtime):
    # With max_concurrency=1 two 120 ms invocations cannot overlap, so the
    # pair takes at least 240 ms end to end.
    fid = runtime.deploy(proc_spec("serial", "sleep", "120", timeout_ms=2000, max_concurrency=1))
    start = time.perf_counter()
    threads = [threading.Thread(target=runtime.invoke, args=(fid, inv(b"x", f"p{i}"))) for i in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=10)
    assert time.perf_counter() - start >= 0.24


def test_oversize_forward_becomes_failure():
    rt = FunctionRuntime(max_payload=4)
    fid = rt.deploy(identity_spec())
    assert rt.invoke(fid, inv(b"toolong")) == Failure("malformed_response")
    rt.remove(fid)


def test_runtime_metrics_counts(runtime):
    fid = runtime.deploy(
        FunctionSpec("flt", BuiltinExecutor("threshold_filter", {"field": "t", "op": ">", "threshold": 1}))
    )
    runtime.invoke(fid, inv(b'{"t": 2}'))
    runtime.invoke(fid, inv(b'{"t": 0}'))
    runtime.invoke(fid, inv(b"junk"))
    m = runtime.metrics()
    assert m["invocations"] == 3
    assert m["forward"] == 1
    assert m["drop"] == 2
    assert m["drop_malformed"] == 1
