"""Sequence-recognizer monitors and the two places they execute.

A monitor is a deterministic finite recognizer over trace events.  Verdicts
are irrevocable: once an automaton flags Accept or Reject it ignores every
later event.  Events matching no transition self-loop, because a tracer
delivers every event of its processes, not only property-relevant ones.

Patterns may constrain fields with literals or with variables; a variable
binds at its first match and must agree thereafter, which is how
per-process (parametric) properties are expressed.  The reserved variable
``owner`` is pre-bound to the instrumented process at instantiation time.

Execution styles:

* externalised: a dedicated analyser process consumes dispatched events,
* internalised: the tracer steps the automaton inline,
* synchronous:  ``InlineWeaver`` steps automata at the emission point with
  no monitor processes at all.  Because that analysis happens inside the
  same atomic step as the system action, its event order per process is
  correct by construction, which makes it the ground-truth oracle the
  other two styles are compared against.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional

from .errors import MonitorSpecError, OverlappingPatterns, UnknownQualifier
from .model import (
    Action,
    Pid,
    Signature,
    StopSignal,
    TraceEvent,
    mk_event,
    render_message,
)
from .runtime import RECEIVE_ANY, Runtime


class Verdict(Enum):
    INCONCLUSIVE = "inc"
    ACCEPT = "acc"
    REJECT = "rej"


class UnreachableVerdictWarning(UserWarning):
    pass


# Field constraints: None matches anything; ("lit", text) requires equality
# with the rendered field; ("var", name) binds on first match.
Constraint = Optional[tuple]


@dataclass(frozen=True)
class EventPattern:
    act: Optional[Action] = None  # None is a wildcard
    src: Constraint = None
    tgt: Constraint = None
    sig: Constraint = None

    def match(self, e: TraceEvent, env: dict[str, str]) -> Optional[dict[str, str]]:
        """Return the (possibly extended) binding env on a match, else None."""
        if self.act is not None and e.act is not self.act:
            return None
        out = env
        for constraint, value in (
            (self.src, e.src),
            (self.tgt, e.tgt),
            (self.sig, e.sig),
        ):
            if constraint is None:
                continue
            if value is None:
                return None
            text = value.render() if isinstance(value, Pid) else value
            if constraint[0] == "lit":
                if text != constraint[1]:
                    return None
            else:
                name = constraint[1]
                bound = out.get(name)
                if bound is None:
                    if out is env:
                        out = dict(env)
                    out[name] = text
                elif bound != text:
                    return None
        return out

    def may_overlap(self, other: "EventPattern") -> bool:
        """Conservative compile-time overlap test (used for determinism)."""
        if self.act is not None and other.act is not None and self.act is not other.act:
            return False
        for a, b in ((self.src, other.src), (self.tgt, other.tgt), (self.sig, other.sig)):
            if a is not None and b is not None and a[0] == "lit" and b[0] == "lit" and a[1] != b[1]:
                return False
        return True

    def render(self) -> str:
        fields = []
        for name, constraint in (("src", self.src), ("tgt", self.tgt), ("sig", self.sig)):
            if constraint is None:
                continue
            value = f"${constraint[1]}" if constraint[0] == "var" else constraint[1]
            fields.append(f"{name}={value}")
        act = self.act.value if self.act is not None else "*"
        return f"{act}({','.join(fields)})" if fields else act


@dataclass(frozen=True)
class MonitorSpec:
    """Declarative automaton description: states, transitions, verdict labels."""

    name: str
    states: tuple[str, ...]
    initial: str
    transitions: tuple[tuple[str, EventPattern, str], ...]
    verdicts: Mapping[str, Verdict] = field(default_factory=dict)


class RecognizerAutomaton:
    """A running monitor instance: deterministic, total, irrevocable."""

    __slots__ = ("spec", "current", "env", "flagged", "_bystate")

    def __init__(self, spec: MonitorSpec, env: Optional[dict[str, str]] = None):
        self.spec = spec
        self.current = spec.initial
        self.env = dict(env or {})
        self.flagged: Optional[Verdict] = None
        self._bystate: dict[str, list[tuple[EventPattern, str]]] = {}
        for src, pat, dst in spec.transitions:
            self._bystate.setdefault(src, []).append((pat, dst))

    def verdict(self) -> Verdict:
        if self.flagged is not None:
            return self.flagged
        return self.spec.verdicts.get(self.current, Verdict.INCONCLUSIVE)

    def step(self, e: TraceEvent) -> Verdict:
        if self.flagged is not None:
            return self.flagged
        for pat, dst in self._bystate.get(self.current, ()):
            newenv = pat.match(e, self.env)
            if newenv is not None:
                self.current = dst
                self.env = newenv
                break
        # no break: unmatched events self-loop
        v = self.spec.verdicts.get(self.current, Verdict.INCONCLUSIVE)
        if v is not Verdict.INCONCLUSIVE:
            self.flagged = v
        return v


def step(a: RecognizerAutomaton, e: TraceEvent) -> tuple[RecognizerAutomaton, Verdict]:
    """Functional wrapper around :meth:`RecognizerAutomaton.step`."""
    return a, a.step(e)


def compile_monitor(
    spec: MonitorSpec, owner: Optional[Pid] = None
) -> RecognizerAutomaton:
    """Validate a monitor description and instantiate it at its initial state."""
    states = set(spec.states)
    if spec.initial not in states:
        raise MonitorSpecError(f"{spec.name}: initial state {spec.initial!r} undeclared")
    bystate: dict[str, list[EventPattern]] = {}
    for src, pat, dst in spec.transitions:
        if src not in states or dst not in states:
            raise MonitorSpecError(f"{spec.name}: transition {src}->{dst} names unknown state")
        for prior in bystate.get(src, ()):
            if prior.may_overlap(pat):
                raise OverlappingPatterns(
                    f"{spec.name}: state {src}: {prior.render()} and {pat.render()} "
                    "can match the same event"
                )
        bystate.setdefault(src, []).append(pat)
    if spec.verdicts and not _verdict_reachable(spec):
        warnings.warn(
            f"{spec.name}: no verdict state is reachable from {spec.initial}",
            UnreachableVerdictWarning,
            stacklevel=2,
        )
    env = {"owner": owner.render()} if owner is not None else {}
    return RecognizerAutomaton(spec, env)


def _verdict_reachable(spec: MonitorSpec) -> bool:
    seen = {spec.initial}
    frontier = [spec.initial]
    while frontier:
        state = frontier.pop()
        if spec.verdicts.get(state, Verdict.INCONCLUSIVE) is not Verdict.INCONCLUSIVE:
            return True
        for src, _, dst in spec.transitions:
            if src == state and dst not in seen:
                seen.add(dst)
                frontier.append(dst)
    return not spec.verdicts


# ---------------------------------------------------------------------------
# Monitor description text format
# ---------------------------------------------------------------------------
#
#   monitor <name> for <signature>
#   state <name> [initial] [accept|reject]
#   <from> --<act>[(field=value,...)]--> <to>
#
# Values are literals or $variables; act may be * for any action.

_TRANS_RE = re.compile(r"(\S+)\s+--([a-z*]+)(?:\(([^)]*)\))?-->\s+(\S+)$")


def parse_monitor_text(text: str) -> dict[Signature, MonitorSpec]:
    out: dict[Signature, MonitorSpec] = {}
    name = sig = initial = None
    states: list[str] = []
    transitions: list[tuple[str, EventPattern, str]] = []
    verdicts: dict[str, Verdict] = {}

    def flush():
        nonlocal name, sig, initial, states, transitions, verdicts
        if name is None:
            return
        if initial is None:
            raise MonitorSpecError(f"{name}: no initial state")
        out[sig] = MonitorSpec(name, tuple(states), initial, tuple(transitions), dict(verdicts))
        name = sig = initial = None
        states, transitions, verdicts = [], [], {}

    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        if words[0] == "monitor":
            flush()
            if len(words) != 4 or words[2] != "for":
                raise MonitorSpecError(f"bad monitor header: {line!r}")
            name, sig = words[1], words[3]
        elif words[0] == "state":
            state = words[1]
            states.append(state)
            for flag in words[2:]:
                if flag == "initial":
                    initial = state
                elif flag == "accept":
                    verdicts[state] = Verdict.ACCEPT
                elif flag == "reject":
                    verdicts[state] = Verdict.REJECT
                else:
                    raise MonitorSpecError(f"unknown state flag {flag!r}")
        else:
            m = _TRANS_RE.match(line)
            if not m:
                raise MonitorSpecError(f"unparseable line: {line!r}")
            src_state, act, fields, dst_state = m.groups()
            transitions.append((src_state, _parse_pattern(act, fields), dst_state))
    flush()
    return out


def _parse_pattern(act: str, fields: Optional[str]) -> EventPattern:
    kwargs: dict = {"act": None if act == "*" else Action(act)}
    for item in (fields or "").split(","):
        item = item.strip()
        if not item:
            continue
        key, eq, value = item.partition("=")
        if not eq or key not in ("src", "tgt", "sig"):
            raise MonitorSpecError(f"bad pattern field {item!r}")
        kwargs[key] = ("var", value[1:]) if value.startswith("$") else ("lit", value)
    return EventPattern(**kwargs)


def dump_monitor_text(specs: Mapping[Signature, MonitorSpec]) -> str:
    lines: list[str] = []
    for sig, spec in specs.items():
        lines.append(f"monitor {spec.name} for {sig}")
        for state in spec.states:
            flags = []
            if state == spec.initial:
                flags.append("initial")
            v = spec.verdicts.get(state)
            if v is Verdict.ACCEPT:
                flags.append("accept")
            elif v is Verdict.REJECT:
                flags.append("reject")
            lines.append(f"state {state} {' '.join(flags)}".rstrip())
        for src, pat, dst in spec.transitions:
            lines.append(f"{src} --{pat.render()}--> {dst}")
        lines.append("")
    return "\n".join(lines)


def load_monitor_file(path: str) -> dict[Signature, MonitorSpec]:
    with open(path, encoding="utf-8") as fh:
        return parse_monitor_text(fh.read())


# ---------------------------------------------------------------------------
# Common monitor shapes
# ---------------------------------------------------------------------------


def chain_monitor(name: str, acts: Iterable[Action]) -> MonitorSpec:
    """Accept exactly when the owner exhibits the given actions in order."""
    acts = list(acts)
    if not acts:
        return MonitorSpec(name, ("s0",), "s0", (), {})
    states = tuple(f"s{i}" for i in range(len(acts))) + ("done",)
    transitions = tuple(
        (f"s{i}", EventPattern(act=a, src=("var", "owner")), f"s{i + 1}" if i + 1 < len(acts) else "done")
        for i, a in enumerate(acts)
    )
    return MonitorSpec(name, states, "s0", transitions, {"done": Verdict.ACCEPT})


def worker_monitor(name: str, requests: int) -> MonitorSpec:
    """Every request is answered, then the worker exits."""
    states: list[str] = []
    transitions: list[tuple[str, EventPattern, str]] = []
    for k in range(requests):
        got, sent = f"w{2 * k}", f"w{2 * k + 1}"
        states += [got, sent]
        transitions.append((got, EventPattern(act=Action.RCV, src=("var", "owner")), sent))
        nxt = f"w{2 * k + 2}" if k + 1 < requests else "served"
        transitions.append((sent, EventPattern(act=Action.SND, src=("var", "owner")), nxt))
    states += ["served", "done"]
    transitions.append(("served", EventPattern(act=Action.EXT, src=("var", "owner")), "done"))
    return MonitorSpec(name, tuple(states), "w0", tuple(transitions), {"done": Verdict.ACCEPT})


def quiet_after_exit_monitor(name: str) -> MonitorSpec:
    """Reject if the owner exhibits anything after its exit event."""
    states = ("live", "gone", "bad")
    transitions = (
        ("live", EventPattern(act=Action.EXT, src=("var", "owner")), "gone"),
        ("gone", EventPattern(src=("var", "owner")), "bad"),
    )
    return MonitorSpec(name, states, "live", transitions, {"bad": Verdict.REJECT})


def exit_monitor(name: str) -> MonitorSpec:
    """Accept once the owner terminates."""
    states = ("live", "done")
    transitions = (("live", EventPattern(act=Action.EXT, src=("var", "owner")), "done"),)
    return MonitorSpec(name, states, "live", transitions, {"done": Verdict.ACCEPT})


# ---------------------------------------------------------------------------
# Externalised analyser process
# ---------------------------------------------------------------------------


def analyser_body(spec: MonitorSpec, owner: Pid, key: str):
    """Behaviour of a dedicated analyser process.

    Stops on the termination signal from its tracer.  Events dispatched
    before that signal are guaranteed to sit ahead of it in the mailbox
    (same sender, FIFO pair), so consuming in order drains them all first.
    """

    def body(ctx):
        auto = compile_monitor(spec, owner=owner)
        while True:
            msg = yield RECEIVE_ANY
            if isinstance(msg, StopSignal):
                ctx.log("final_verdict", key=key, v=auto.verdict().value)
                return
            if not isinstance(msg, TraceEvent):
                raise UnknownQualifier(f"analyser got {type(msg).__name__}")
            before = auto.flagged
            auto.step(msg)
            if auto.flagged is not None and before is None:
                ctx.log("verdict", key=key, v=auto.flagged.value)

    return body


# ---------------------------------------------------------------------------
# Synchronous in-step analysis (the oracle baseline)
# ---------------------------------------------------------------------------


class InlineWeaver:
    """Runtime action hook that analyses events at their emission point.

    Monitors are instantiated per instrumented process, keyed by the fork
    that created it; processes forked with unmapped signatures share their
    parent's monitor (or none).  The top-level process has no creating fork
    and therefore no monitor of its own.
    """

    def __init__(self, rt: Runtime, monitor_map: Mapping[Signature, MonitorSpec]):
        self._rt = rt
        self._phi = dict(monitor_map)
        self.owner: dict[Pid, Optional[str]] = {}
        self.machines: dict[str, RecognizerAutomaton] = {}
        self._seq: dict[Pid, int] = {}

    def register_top(self, pid: Pid) -> None:
        self.owner[pid] = None

    def on_fork(self, parent: Pid, child: Pid, sig: str) -> None:
        self._step(parent, Action.FRK, tgt=child, sig=sig)
        spec = self._phi.get(sig)
        if spec is not None:
            key = f"{self._rt.procs[child].path}/{sig}"
            self.machines[key] = compile_monitor(spec, owner=child)
            self.owner[child] = key
        else:
            self.owner[child] = self.owner.get(parent)

    def on_exit(self, pid: Pid) -> None:
        self._step(pid, Action.EXT)

    def on_send(self, src: Pid, dst: Pid) -> None:
        self._step(src, Action.SND, tgt=dst)

    def on_recv(self, pid: Pid) -> None:
        self._step(pid, Action.RCV)

    def _step(self, pid: Pid, act: Action, tgt: Optional[Pid] = None, sig: Optional[str] = None) -> None:
        key = self.owner.get(pid)
        if key is None:
            return
        seq = self._seq.get(pid, 0)
        self._seq[pid] = seq + 1
        ev = mk_event(act, pid, tgt, sig, seq)
        st = self._rt.stats
        st.events_total += 1
        if act in (Action.SND, Action.RCV):
            st.events_comm += 1
        auto = self.machines[key]
        before = auto.flagged
        auto.step(ev)
        self._rt._log(pid.render(), "inline", {"key": key, "msg": render_message(ev)})
        if auto.flagged is not None and before is None:
            self._rt._log(pid.render(), "verdict", {"key": key, "v": auto.flagged.value})

    def finish(self) -> None:
        for key, auto in self.machines.items():
            self._rt._log("-", "final_verdict", {"key": key, "v": auto.verdict().value})
