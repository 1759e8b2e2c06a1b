"""Identifiers, messages, trace events, and tracer state.

Everything here is a plain value: immutable after construction and safe to
hand between logical processes.  The one exception is ``TracerState``, which
is private to a single tracer and mutated only through the guarded helpers
below (the guards turn bookkeeping slips into hard errors instead of silent
corruption).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Union

from .errors import (
    MalformedEvent,
    NestedRouting,
    RouteExists,
    RouteMissing,
    TracedExists,
    TracedMissing,
)

# ---------------------------------------------------------------------------
# Process identifiers
# ---------------------------------------------------------------------------


class PidKind(Enum):
    SYSTEM = "S"
    TRACER = "T"
    ANALYZER = "A"


class Pid:
    """Typed process identifier.  Serial is unique per run across all kinds.

    Hand-rolled value type: pids key every hot-path dict in the runtime, so
    hashing must stay as cheap as hashing an int.
    """

    __slots__ = ("serial", "kind")

    def __init__(self, serial: int, kind: PidKind):
        object.__setattr__(self, "serial", serial)
        object.__setattr__(self, "kind", kind)

    def __setattr__(self, name, value):
        raise AttributeError("Pid is immutable")

    def __hash__(self) -> int:
        return self.serial

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Pid)
            and self.serial == other.serial
            and self.kind is other.kind
        )

    def render(self) -> str:
        return f"{self.kind.value}{self.serial}"

    def __repr__(self) -> str:  # keeps log payloads and debugger output aligned
        return self.render()


_PID_RE = re.compile(r"([STA])(\d+)$")


def parse_pid(text: str) -> Pid:
    m = _PID_RE.match(text)
    if not m:
        raise ValueError(f"not a pid: {text!r}")
    kind = {"S": PidKind.SYSTEM, "T": PidKind.TRACER, "A": PidKind.ANALYZER}[m.group(1)]
    return Pid(int(m.group(2)), kind)


# ---------------------------------------------------------------------------
# Actions and trace events
# ---------------------------------------------------------------------------


class Action(Enum):
    FRK = "frk"
    EXT = "ext"
    SND = "snd"
    RCV = "rcv"


#: Exact payload fields carried by each action, beyond the mandatory source.
EVENT_FIELDS: Mapping[Action, tuple[str, ...]] = {
    Action.FRK: ("src", "tgt", "sig"),
    Action.EXT: ("src",),
    Action.SND: ("src", "tgt"),
    Action.RCV: ("src",),
}

#: Code signatures are compared purely by name.
Signature = str


@dataclass(frozen=True)
class TraceEvent:
    act: Action
    src: Pid
    tgt: Optional[Pid] = None
    sig: Optional[Signature] = None
    seq: int = 0


def mk_event(
    act: Action,
    src: Pid,
    tgt: Optional[Pid] = None,
    sig: Optional[Signature] = None,
    seq: int = 0,
) -> TraceEvent:
    """Build a trace event, rejecting any field combination off the table."""
    fields = EVENT_FIELDS[act]
    if src.kind is not PidKind.SYSTEM:
        raise MalformedEvent(f"event source must be a system pid, got {src}")
    if ("tgt" in fields) != (tgt is not None):
        raise MalformedEvent(f"{act.value} events {'require' if 'tgt' in fields else 'must not carry'} tgt")
    if ("sig" in fields) != (sig is not None):
        raise MalformedEvent(f"{act.value} events {'require' if 'sig' in fields else 'must not carry'} sig")
    if tgt is not None and tgt.kind is not PidKind.SYSTEM:
        raise MalformedEvent(f"event target must be a system pid, got {tgt}")
    if seq < 0:
        raise MalformedEvent("seq must be non-negative")
    return TraceEvent(act, src, tgt, sig, seq)


# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DetachCommand:
    """Issued by a tracer that just took over a process, sent to its router."""

    iss: Pid  # issuer tracer
    tgt: Pid  # system process being detached


@dataclass(frozen=True)
class RoutedMessage:
    """Wrapper a tracer puts around a message it routes to the next hop."""

    rtr: Pid  # the tracer that originally wrapped the message
    emb: Union[TraceEvent, DetachCommand]


@dataclass(frozen=True)
class SysMessage:
    """Ordinary payload exchanged between system processes."""

    payload: str


@dataclass(frozen=True)
class StopSignal:
    """Tracer-to-analyser request to finish up and terminate."""


Message = Union[TraceEvent, DetachCommand, RoutedMessage, SysMessage, StopSignal]


def qualifier(m: Message) -> str:
    if isinstance(m, TraceEvent):
        return "evt"
    if isinstance(m, DetachCommand):
        return "dtc"
    if isinstance(m, RoutedMessage):
        return "rtd"
    if isinstance(m, SysMessage):
        return "sys"
    if isinstance(m, StopSignal):
        return "stp"
    raise TypeError(f"not a message: {m!r}")


def wrap_routed(m: Message, router: Pid) -> RoutedMessage:
    """Wrap an event or detach command for hop-by-hop routing."""
    if isinstance(m, RoutedMessage):
        raise NestedRouting("routed messages are never wrapped twice")
    if not isinstance(m, (TraceEvent, DetachCommand)):
        raise NestedRouting(f"only evt/dtc messages are routable, got {qualifier(m)}")
    return RoutedMessage(rtr=router, emb=m)


# --- canonical textual rendering (stable; the log format depends on it) ----


def render_message(m: Message) -> str:
    if isinstance(m, TraceEvent):
        parts = [m.act.value, f"src={m.src.render()}"]
        if m.tgt is not None:
            parts.append(f"tgt={m.tgt.render()}")
        if m.sig is not None:
            parts.append(f"sig={m.sig}")
        parts.append(f"seq={m.seq}")
        return f"evt({' '.join(parts)})"
    if isinstance(m, DetachCommand):
        return f"dtc(iss={m.iss.render()} tgt={m.tgt.render()})"
    if isinstance(m, RoutedMessage):
        return f"rtd(rtr={m.rtr.render()} emb={render_message(m.emb)})"
    if isinstance(m, SysMessage):
        return f"sys({m.payload})"
    if isinstance(m, StopSignal):
        return "stp()"
    raise TypeError(f"not a message: {m!r}")


_EVT_RE = re.compile(
    r"evt\((frk|ext|snd|rcv) src=([STA]\d+)(?: tgt=([STA]\d+))?(?: sig=([^ )]+))? seq=(\d+)\)$"
)
_DTC_RE = re.compile(r"dtc\(iss=([STA]\d+) tgt=([STA]\d+)\)$")
_RTD_RE = re.compile(r"rtd\(rtr=([STA]\d+) emb=(.+)\)$")
_SYS_RE = re.compile(r"sys\((.*)\)$")


def parse_message(text: str) -> Message:
    """Inverse of :func:`render_message`."""
    m = _EVT_RE.match(text)
    if m:
        act, src, tgt, sig, seq = m.groups()
        return TraceEvent(
            Action(act),
            parse_pid(src),
            parse_pid(tgt) if tgt else None,
            sig,
            int(seq),
        )
    m = _DTC_RE.match(text)
    if m:
        return DetachCommand(parse_pid(m.group(1)), parse_pid(m.group(2)))
    m = _RTD_RE.match(text)
    if m:
        emb = parse_message(m.group(2))
        if not isinstance(emb, (TraceEvent, DetachCommand)):
            raise ValueError(f"bad embedded message in {text!r}")
        return RoutedMessage(parse_pid(m.group(1)), emb)
    m = _SYS_RE.match(text)
    if m:
        return SysMessage(m.group(1))
    if text == "stp()":
        return StopSignal()
    raise ValueError(f"unparseable message: {text!r}")


# ---------------------------------------------------------------------------
# Tracer state
# ---------------------------------------------------------------------------

#: Trace-handling modes: direct consumes anything, priority consumes only
#: routed messages.  The same marks tag entries of the traced-processes map.
DIRECT = "dir"
PRIORITY = "pri"


@dataclass
class TracerState:
    """Private working state of one tracer process.

    ``routing`` and ``traced`` always have disjoint key sets: a process is
    either traced here or routed elsewhere, never both.
    """

    self_pid: Pid
    routing: dict[Pid, Pid]
    monitor_map: Mapping[Signature, "object"]  # Signature -> MonitorSpec
    traced: dict[Pid, str]
    mode: str = DIRECT
    analyzer: Optional[Pid] = None
    alive: bool = True

    # Guarded mutators: each one enforces the map discipline the protocol
    # relies on, so a bookkeeping slip fails loudly at the mutation site.

    def route_add(self, proc: Pid, hop: Pid) -> None:
        if proc in self.routing:
            raise RouteExists(f"{self.self_pid} already routes {proc}")
        if proc in self.traced:
            raise RouteExists(f"{self.self_pid} traces {proc}; cannot also route it")
        self.routing[proc] = hop

    def route_del(self, proc: Pid) -> None:
        if proc not in self.routing:
            raise RouteMissing(f"{self.self_pid} has no route for {proc}")
        del self.routing[proc]

    def traced_add(self, proc: Pid, mark: str) -> None:
        if proc in self.traced:
            raise TracedExists(f"{self.self_pid} already traces {proc}")
        if proc in self.routing:
            raise TracedExists(f"{self.self_pid} routes {proc}; cannot also trace it")
        self.traced[proc] = mark

    def traced_del(self, proc: Pid) -> None:
        if proc not in self.traced:
            raise TracedMissing(f"{self.self_pid} does not trace {proc}")
        del self.traced[proc]

    def mark_detached(self, proc: Pid) -> bool:
        """Flip a traced process from priority to direct mark.

        Returns False when the process is already gone from the map, which
        happens when its routed exit event was analysed before the detach
        acknowledgement came back.  That interleaving is legal, so the flip
        degrades to a no-op instead of an error.
        """
        if proc not in self.traced:
            return False
        self.traced[proc] = DIRECT
        return True

    def has_priority_entries(self) -> bool:
        return any(mark == PRIORITY for mark in self.traced.values())


def render_pid_map(mapping: Mapping[Pid, object]) -> str:
    """Stable one-token rendering of a pid-keyed map, '-' when empty."""
    if not mapping:
        return "-"
    items = sorted(mapping.items(), key=lambda kv: kv[0].serial)

    def show(v: object) -> str:
        return v.render() if isinstance(v, Pid) else str(v)

    return ",".join(f"{k.render()}:{show(v)}" for k, v in items)
