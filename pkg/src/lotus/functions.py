"""Function registry and executors that process publications in transit.

Two executor backends: hermetic builtins (filtering, transformation,
extraction, identity) and long-lived external processes speaking a
line-delimited JSON record protocol on stdin/stdout. Invocations of one
function are admitted FIFO up to its concurrency cap; failures are expressed
as Outcome values, never raised, so pipelines can count them.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import json
import logging
import operator
import os
import re
import subprocess
import threading
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Mapping

from .broker import DEFAULT_MAX_PAYLOAD
from .errors import DuplicateName, InvalidConfig, UnknownFunction
from .geo import Location

log = logging.getLogger(__name__)

BUILTIN_KINDS = ("identity", "threshold_filter", "json_to_csv", "extract_keys")
_THRESHOLD_OPS = {">": operator.gt, ">=": operator.ge, "<": operator.lt, "<=": operator.le}
_NAME_RE = re.compile(r"^[A-Za-z0-9._-]+$")

FAILURE_TIMEOUT = "timeout"
FAILURE_CRASH = "crash"
FAILURE_MALFORMED = "malformed_response"


@dataclass(frozen=True)
class BuiltinExecutor:
    kind: str
    config: Mapping[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class ProcessExecutor:
    command: tuple[str, ...]
    env: Mapping[str, str] = field(default_factory=dict)


Executor = BuiltinExecutor | ProcessExecutor


@dataclass(frozen=True)
class FunctionSpec:
    name: str
    executor: Executor
    timeout_ms: int = 1000
    max_concurrency: int = 8


@dataclass(frozen=True)
class Invocation:
    """What a function sees for one triggering publication."""

    publication_id: str
    topic: str
    payload: bytes
    publisher_location: Location
    published_at: int


@dataclass(frozen=True)
class Forward:
    payload: bytes


@dataclass(frozen=True)
class Drop:
    # Internal observability only; a Drop never reaches the wire. "malformed"
    # marks fail-closed drops so metrics can count them separately.
    note: str | None = None


@dataclass(frozen=True)
class Failure:
    reason: str


Outcome = Forward | Drop | Failure


def validate_spec(spec: FunctionSpec) -> None:
    """Raise InvalidConfig on any malformed field. Called at deploy time."""
    if not spec.name or not _NAME_RE.match(spec.name):
        raise InvalidConfig(f"function name {spec.name!r} must match {_NAME_RE.pattern}")
    if not isinstance(spec.timeout_ms, int) or spec.timeout_ms <= 0:
        raise InvalidConfig("timeout_ms must be a positive integer")
    if not isinstance(spec.max_concurrency, int) or spec.max_concurrency <= 0:
        raise InvalidConfig("max_concurrency must be a positive integer")
    ex = spec.executor
    if isinstance(ex, BuiltinExecutor):
        _validate_builtin(ex.kind, dict(ex.config))
    elif isinstance(ex, ProcessExecutor):
        if not ex.command or not all(isinstance(c, str) and c for c in ex.command):
            raise InvalidConfig("process command must be a non-empty list of strings")
        if not all(isinstance(k, str) and isinstance(v, str) for k, v in ex.env.items()):
            raise InvalidConfig("process env must map strings to strings")
    else:
        raise InvalidConfig(f"unknown executor type {type(ex).__name__}")


def _validate_builtin(kind: str, config: dict) -> None:
    if kind not in BUILTIN_KINDS:
        raise InvalidConfig(f"unknown builtin kind {kind!r}")
    if kind == "threshold_filter":
        if set(config) != {"field", "op", "threshold"}:
            raise InvalidConfig("threshold_filter config needs exactly field, op, threshold")
        if not isinstance(config["field"], str) or not config["field"]:
            raise InvalidConfig("threshold_filter field must be a non-empty string")
        if config["op"] not in _THRESHOLD_OPS:
            raise InvalidConfig(f"threshold_filter op must be one of {sorted(_THRESHOLD_OPS)}")
        if not _is_number(config["threshold"]):
            raise InvalidConfig("threshold_filter threshold must be a number")
    elif kind == "extract_keys":
        if set(config) != {"keys"}:
            raise InvalidConfig("extract_keys config needs exactly keys")
        keys = config["keys"]
        if not isinstance(keys, (list, tuple)) or not keys or not all(isinstance(k, str) for k in keys):
            raise InvalidConfig("extract_keys keys must be a non-empty list of strings")
    elif config:
        raise InvalidConfig(f"builtin {kind!r} takes no config")


def spec_to_json(spec: FunctionSpec) -> dict:
    ex = spec.executor
    if isinstance(ex, BuiltinExecutor):
        executor: dict = {"kind": "builtin", "builtin": ex.kind, "config": dict(ex.config)}
    else:
        executor = {"kind": "process", "command": list(ex.command), "env": dict(ex.env)}
    return {
        "name": spec.name,
        "executor": executor,
        "timeout_ms": spec.timeout_ms,
        "max_concurrency": spec.max_concurrency,
    }


def spec_from_json(obj: object) -> FunctionSpec:
    if not isinstance(obj, dict):
        raise InvalidConfig("function spec must be a JSON object")
    name = obj.get("name")
    if not isinstance(name, str):
        raise InvalidConfig("function spec needs a string name")
    ex = obj.get("executor")
    if not isinstance(ex, dict):
        raise InvalidConfig("function spec needs an executor object")
    kind = ex.get("kind")
    executor: Executor
    if kind == "builtin":
        builtin = ex.get("builtin")
        if not isinstance(builtin, str):
            raise InvalidConfig("builtin executor needs a builtin kind name")
        config = ex.get("config", {})
        if not isinstance(config, dict):
            raise InvalidConfig("builtin config must be an object")
        executor = BuiltinExecutor(builtin, config)
    elif kind == "process":
        command = ex.get("command")
        if not isinstance(command, list):
            raise InvalidConfig("process executor needs a command list")
        env = ex.get("env", {})
        if not isinstance(env, dict):
            raise InvalidConfig("process env must be an object")
        executor = ProcessExecutor(tuple(command), env)
    else:
        raise InvalidConfig(f"unknown executor kind {kind!r}")
    timeout_ms = obj.get("timeout_ms", 1000)
    max_concurrency = obj.get("max_concurrency", 8)
    if isinstance(timeout_ms, bool) or not isinstance(timeout_ms, int):
        raise InvalidConfig("timeout_ms must be an integer")
    if isinstance(max_concurrency, bool) or not isinstance(max_concurrency, int):
        raise InvalidConfig("max_concurrency must be an integer")
    spec = FunctionSpec(name, executor, timeout_ms, max_concurrency)
    validate_spec(spec)
    return spec


def spec_digest(spec: FunctionSpec) -> str:
    """Content digest used to dedup byte-identical inline specs across clients."""
    canon = json.dumps(spec_to_json(spec), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:32]


# -- builtins ---------------------------------------------------------------


def _is_number(v: object) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def run_builtin(kind: str, payload: bytes, config: Mapping[str, object]) -> Outcome:
    """Dispatch a builtin; pure in (payload, config)."""
    if kind == "identity":
        return Forward(payload)
    if kind == "threshold_filter":
        return builtin_threshold_filter(payload, config)
    if kind == "json_to_csv":
        return builtin_json_to_csv(payload)
    if kind == "extract_keys":
        return builtin_extract_keys(payload, config)
    raise UnknownFunction(f"builtin {kind!r}")


def builtin_threshold_filter(payload: bytes, config: Mapping[str, object]) -> Outcome:
    """Forward the unmodified payload iff a numeric field passes the comparison.

    Unparsable payloads and missing or non-numeric fields drop fail-closed.
    """
    try:
        obj = json.loads(payload)
    except (ValueError, UnicodeDecodeError):
        return Drop(note="malformed")
    if not isinstance(obj, dict):
        return Drop(note="malformed")
    value = obj.get(config["field"])
    if not _is_number(value):
        return Drop(note="malformed")
    if _THRESHOLD_OPS[config["op"]](value, config["threshold"]):
        return Forward(payload)
    return Drop()


def _csv_cell(v: object) -> str:
    if v is None:
        return ""
    if v is True:
        return "true"
    if v is False:
        return "false"
    if isinstance(v, (int, float)):
        return repr(v)
    s = str(v)
    if any(ch in s for ch in ',"\n'):
        return '"' + s.replace('"', '""') + '"'
    return s


def builtin_json_to_csv(payload: bytes) -> Outcome:
    """Render a JSON array of flat objects as CSV.

    Header is the lexicographically sorted union of keys, one row per object
    in array order, missing values empty, trailing newline. Non-array or
    nested input is a malformed-response failure.
    """
    try:
        arr = json.loads(payload)
    except (ValueError, UnicodeDecodeError):
        return Failure(FAILURE_MALFORMED)
    if not isinstance(arr, list):
        return Failure(FAILURE_MALFORMED)
    keys: set[str] = set()
    for row in arr:
        if not isinstance(row, dict):
            return Failure(FAILURE_MALFORMED)
        for v in row.values():
            if isinstance(v, (dict, list)):
                return Failure(FAILURE_MALFORMED)
        keys.update(row)
    header = sorted(keys)
    lines = [",".join(_csv_cell(k) for k in header)]
    for row in arr:
        lines.append(",".join(_csv_cell(row.get(k)) for k in header))
    return Forward(("\n".join(lines) + "\n").encode("utf-8"))


def builtin_extract_keys(payload: bytes, config: Mapping[str, object]) -> Outcome:
    """Condense a JSON object down to the configured keys, in configured order."""
    try:
        obj = json.loads(payload)
    except (ValueError, UnicodeDecodeError):
        return Drop(note="malformed")
    if not isinstance(obj, dict):
        return Drop(note="malformed")
    out = {k: obj[k] for k in config["keys"] if k in obj}
    if not out:
        return Drop()
    return Forward(json.dumps(out, separators=(",", ":")).encode("utf-8"))


# -- concurrency gate ---------------------------------------------------------


class _FifoGate:
    """Admission control: at most `cap` holders, waiters admitted strictly FIFO."""

    def __init__(self, cap: int):
        self._cap = cap
        self._lock = threading.Lock()
        self._active = 0
        self._waiters: deque[threading.Event] = deque()

    def acquire(self) -> None:
        with self._lock:
            if self._active < self._cap:
                self._active += 1
                return
            ev = threading.Event()
            self._waiters.append(ev)
        ev.wait()

    def release(self) -> None:
        with self._lock:
            if self._waiters:
                self._waiters.popleft().set()  # hand the slot over
            else:
                self._active -= 1


# -- external process host ----------------------------------------------------


class _Slot:
    __slots__ = ("id", "event", "outcome", "resolved")

    def __init__(self, request_id: str):
        self.id = request_id
        self.event = threading.Event()
        self.outcome: Outcome | None = None
        self.resolved = False


class _ProcessHost:
    """One warm external process per function, restarted lazily after a crash.

    Requests go out as one JSON line each on stdin; responses come back on
    stdout and may arrive out of order (correlation is by id). A line that
    fails to parse fails the oldest unanswered request.
    """

    def __init__(self, name: str, command: tuple[str, ...], env: Mapping[str, str]):
        self._name = name
        self._command = command
        self._env = env
        self._lock = threading.Lock()
        self._proc: subprocess.Popen | None = None
        self._order: deque[_Slot] = deque()
        self._by_id: dict[str, deque[_Slot]] = {}
        self._closed = False

    def request(self, inv: Invocation, timeout_ms: int) -> Outcome:
        line = json.dumps(
            {
                "id": inv.publication_id,
                "topic": inv.topic,
                "payload_b64": base64.b64encode(inv.payload).decode("ascii"),
                "lat": inv.publisher_location.lat,
                "lon": inv.publisher_location.lon,
                "ts": inv.published_at,
            },
            separators=(",", ":"),
        )
        with self._lock:
            if self._closed:
                return Failure(FAILURE_CRASH)
            try:
                self._ensure_proc_locked()
            except OSError:
                log.warning("function %s: cannot start %s", self._name, self._command, exc_info=True)
                return Failure(FAILURE_CRASH)
            slot = _Slot(inv.publication_id)
            self._order.append(slot)
            self._by_id.setdefault(slot.id, deque()).append(slot)
            assert self._proc is not None and self._proc.stdin is not None
            try:
                self._proc.stdin.write(line.encode("utf-8") + b"\n")
                self._proc.stdin.flush()
            except (OSError, ValueError):
                self._resolve_locked(slot, Failure(FAILURE_CRASH))
                return Failure(FAILURE_CRASH)
        slot.event.wait(timeout_ms / 1000.0)
        with self._lock:
            if not slot.resolved:
                self._resolve_locked(slot, Failure(FAILURE_TIMEOUT))
        assert slot.outcome is not None
        return slot.outcome

    def terminate(self) -> None:
        with self._lock:
            self._closed = True
            proc = self._proc
        if proc is not None:
            proc.kill()
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                log.warning("function %s: process did not die on kill", self._name)

    def _ensure_proc_locked(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            return
        env = dict(os.environ)
        env.update(self._env)
        self._proc = subprocess.Popen(
            list(self._command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            env=env,
        )
        threading.Thread(target=self._read_stdout, args=(self._proc,), daemon=True).start()
        threading.Thread(target=self._drain_stderr, args=(self._proc,), daemon=True).start()

    def _resolve_locked(self, slot: _Slot, outcome: Outcome) -> None:
        slot.outcome = outcome
        slot.resolved = True
        dq = self._by_id.get(slot.id)
        if dq is not None:
            try:
                dq.remove(slot)
            except ValueError:
                pass
            if not dq:
                del self._by_id[slot.id]
        while self._order and self._order[0].resolved:
            self._order.popleft()
        slot.event.set()

    def _oldest_unanswered_locked(self) -> _Slot | None:
        for slot in self._order:
            if not slot.resolved:
                return slot
        return None

    def _read_stdout(self, proc: subprocess.Popen) -> None:
        assert proc.stdout is not None
        for raw in proc.stdout:
            outcome_payload: bytes | None = None
            try:
                msg = json.loads(raw)
                if not isinstance(msg, dict) or not isinstance(msg.get("id"), str):
                    raise ValueError("bad response shape")
                action = msg.get("action")
                if action == "forward":
                    outcome_payload = base64.b64decode(msg["payload_b64"], validate=True)
                elif action != "drop":
                    raise ValueError(f"bad action {action!r}")
            except (ValueError, KeyError, TypeError, binascii.Error):
                with self._lock:
                    oldest = self._oldest_unanswered_locked()
                    if oldest is not None:
                        self._resolve_locked(oldest, Failure(FAILURE_MALFORMED))
                continue
            with self._lock:
                dq = self._by_id.get(msg["id"])
                if not dq:
                    continue  # late reply for a timed-out request
                slot = dq[0]
                if outcome_payload is not None:
                    self._resolve_locked(slot, Forward(outcome_payload))
                else:
                    self._resolve_locked(slot, Drop())
        with self._lock:
            for slot in list(self._order):
                if not slot.resolved:
                    self._resolve_locked(slot, Failure(FAILURE_CRASH))
            if self._proc is proc:
                self._proc = None  # lazy restart on next request

    def _drain_stderr(self, proc: subprocess.Popen) -> None:
        assert proc.stderr is not None
        for raw in proc.stderr:
            log.debug("function %s stderr: %s", self._name, raw.rstrip().decode("utf-8", "replace"))


# -- registry -----------------------------------------------------------------


class _Deployed:
    def __init__(self, spec: FunctionSpec):
        self.spec = spec
        self.gate = _FifoGate(spec.max_concurrency)
        self.host = (
            _ProcessHost(spec.name, spec.executor.command, spec.executor.env)
            if isinstance(spec.executor, ProcessExecutor)
            else None
        )
        self.counters: Counter = Counter()
        self._cond = threading.Condition()
        self._inflight = 0
        self._closed = False

    def begin(self) -> bool:
        with self._cond:
            if self._closed:
                return False
            self._inflight += 1
            return True

    def end(self) -> None:
        with self._cond:
            self._inflight -= 1
            self._cond.notify_all()

    def close_and_drain(self) -> None:
        with self._cond:
            self._closed = True
            while self._inflight:
                self._cond.wait()
        if self.host is not None:
            self.host.terminate()


class FunctionRuntime:
    """Registry of deployed functions plus their invocation machinery."""

    def __init__(self, max_payload: int = DEFAULT_MAX_PAYLOAD):
        self.max_payload = max_payload
        self._lock = threading.Lock()
        self._functions: dict[str, _Deployed] = {}
        self.totals: Counter = Counter()

    def deploy(self, spec: FunctionSpec) -> str:
        validate_spec(spec)
        with self._lock:
            if spec.name in self._functions:
                raise DuplicateName(spec.name)
            self._functions[spec.name] = _Deployed(spec)
        return spec.name

    def get_spec(self, function_id: str) -> FunctionSpec | None:
        with self._lock:
            rec = self._functions.get(function_id)
            return rec.spec if rec else None

    def remove(self, function_id: str) -> None:
        """Stop accepting invocations, wait out in-flight ones, kill warm processes."""
        with self._lock:
            rec = self._functions.pop(function_id, None)
        if rec is None:
            raise UnknownFunction(function_id)
        rec.close_and_drain()

    def list(self) -> list[FunctionSpec]:
        with self._lock:
            return [rec.spec for rec in self._functions.values()]

    def invoke(self, function_id: str, inv: Invocation) -> Outcome:
        with self._lock:
            rec = self._functions.get(function_id)
        if rec is None or not rec.begin():
            raise UnknownFunction(function_id)
        try:
            rec.gate.acquire()
            try:
                outcome = self._execute(rec, inv)
            finally:
                rec.gate.release()
        finally:
            rec.end()
        if isinstance(outcome, Forward) and len(outcome.payload) > self.max_payload:
            outcome = Failure(FAILURE_MALFORMED)
        self._count(rec, outcome)
        return outcome

    def _execute(self, rec: _Deployed, inv: Invocation) -> Outcome:
        ex = rec.spec.executor
        if isinstance(ex, BuiltinExecutor):
            return run_builtin(ex.kind, inv.payload, ex.config)
        assert rec.host is not None
        return rec.host.request(inv, rec.spec.timeout_ms)

    def _count(self, rec: _Deployed, outcome: Outcome) -> None:
        keys = ["invocations"]
        if isinstance(outcome, Forward):
            keys.append("forward")
        elif isinstance(outcome, Drop):
            keys.append("drop")
            if outcome.note:
                keys.append(f"drop_{outcome.note}")
        else:
            keys.append(f"failure_{outcome.reason}")
        for k in keys:
            rec.counters[k] += 1
            self.totals[k] += 1

    def metrics(self) -> dict:
        with self._lock:
            per_function = {name: dict(rec.counters) for name, rec in self._functions.items()}
            out = dict(self.totals)
            out["deployed"] = len(self._functions)
            out["per_function"] = per_function
            return out
