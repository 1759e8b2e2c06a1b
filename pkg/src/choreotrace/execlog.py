"""Execution log: the totally ordered record every checker works from.

One entry per observable occurrence (scheduler pick, send, delivery,
consumption, analysis, verdict, ...).  Entries render to a line-oriented
text format and parse back losslessly, so saved logs can be re-checked
offline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

from .errors import LogParseError

# Entry kinds, for reference (the checker dispatches on these):
#   sched      scheduler step with its chosen token
#   spawn      process created
#   resume     paused process released
#   emit       trace event generated by a system action
#   send       plain asynchronous send (sys payloads, dtc, stop signals, EA dispatch)
#   route      wrap-and-send of a routed message
#   forwd      verbatim pass-on of a routed message
#   deliver    message moved from in-flight into a mailbox
#   consume    message dequeued by its owner
#   analyse    a tracer fed an event to analysis (or discarded it, for the root)
#   tstate     tracer state snapshot after one handled message
#   instrument a new tracer was spawned for a forked process
#   bind/unbind/flush/preempt   trace-binding operations
#   mode       tracer switched from priority to direct handling
#   verdict    a monitor flagged Accept/Reject
#   final_verdict  monitor's verdict at its owner's termination
#   inline     synchronous analysis step (inline mode only)
#   terminate  process ended (reason=exit|crash|gc|halted|error)
#   protocol_error  captured protocol violation (mutated runs only)
#   quiescent  run summary trailer


@dataclass
class LogEntry:
    __slots__ = ("idx", "pid", "kind", "data")

    idx: int
    pid: str  # render of the acting pid, or '-' for runtime-level entries
    kind: str
    data: dict[str, str]

    def render(self) -> str:
        if not self.data:
            return f"{self.idx}|{self.pid}|{self.kind}"
        body = "|".join(f"{k}={v}" for k, v in self.data.items())
        return f"{self.idx}|{self.pid}|{self.kind}|{body}"


def parse_entry(line: str) -> LogEntry:
    parts = line.rstrip("\n").split("|")
    if len(parts) < 3:
        raise LogParseError(f"bad log line: {line!r}")
    try:
        idx = int(parts[0])
    except ValueError as exc:
        raise LogParseError(f"bad step index in {line!r}") from exc
    data: dict[str, str] = {}
    for tok in parts[3:]:
        key, eq, value = tok.partition("=")
        if not eq:
            raise LogParseError(f"bad field {tok!r} in {line!r}")
        data[key] = value
    return LogEntry(idx, parts[1], parts[2], data)


class ExecutionLog:
    """Ordered list of entries with text round-trip."""

    def __init__(self, entries: list[LogEntry] | None = None):
        self.entries: list[LogEntry] = entries if entries is not None else []

    def append(self, entry: LogEntry) -> None:
        self.entries.append(entry)

    def __iter__(self) -> Iterator[LogEntry]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def render_text(self) -> str:
        return "\n".join(e.render() for e in self.entries) + ("\n" if self.entries else "")

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.render_text())

    @classmethod
    def from_text(cls, text: str) -> "ExecutionLog":
        entries = [parse_entry(line) for line in text.splitlines() if line.strip()]
        return cls(entries)

    @classmethod
    def read(cls, path: str) -> "ExecutionLog":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


#: A sink receives every entry as it happens; the runtime fans entries out to
#: all installed sinks.  ExecutionLog.append is itself a valid sink.
LogSink = Callable[[LogEntry], None]


@dataclass
class Tee:
    """Fan one entry out to several sinks."""

    sinks: Iterable[LogSink] = field(default_factory=list)

    def __call__(self, entry: LogEntry) -> None:
        for sink in self.sinks:
            sink(entry)
