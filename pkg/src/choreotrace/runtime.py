"""Deterministic discrete-step actor runtime.

Logical processes own FIFO mailboxes and communicate through asynchronous
point-to-point messages.  A scheduler drives the whole system one atomic
action at a time; each action is either

* ``run``:  one process consumes a message and runs its handler to
  completion (or executes one script step), or
* ``deliver``: one in-flight message moves from its per-sender-pair queue
  (or a tracer's event channel) into the receiver's mailbox.

Because delivery is its own scheduler action, message reordering across
sender pairs is an explored dimension rather than an accident, while
successive messages between one (sender, receiver) pair always arrive in
the order sent.

Runs are pure functions of the schedule: the same seed or the same explicit
step list reproduces a bit-identical execution log.
"""

from __future__ import annotations

import random
import re
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import (
    InvalidScheduleStep,
    ProtocolViolation,
    ScheduleExhausted,
    StepCapExceeded,
)
from .execlog import ExecutionLog, LogEntry, LogSink
from .model import (
    Message,
    Pid,
    PidKind,
    SysMessage,
    parse_pid,
    render_message,
)

DEFAULT_STEP_CAP = 10_000_000

# ---------------------------------------------------------------------------
# Effects yielded by process behaviours
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Receive:
    """Ask the runtime for the next message.

    Without a predicate the mailbox head is consumed.  With one, the mailbox
    is scanned from the head and the first satisfying message is removed;
    everything else keeps its place and order.  Either way the process
    blocks until a candidate exists.
    """

    match: Optional[Callable[[Message], bool]] = None


@dataclass(frozen=True)
class Yield:
    """Plain step boundary: give the scheduler a turn, consume nothing."""


#: Shared effect instances (behaviours yield these every step; reallocating
#: them is pure overhead).
YIELD = Yield()
RECEIVE_ANY = Receive()


def _szudzik(a: int, b: int) -> int:
    """Injective pairing of two non-negative ints."""
    return a * a + a + b if a >= b else b * b + a


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


@dataclass
class Schedule:
    """Either a seed (randomised run) or an explicit token list (replay)."""

    seed: Optional[int] = None
    steps: Optional[list[str]] = None

    def serialize(self) -> str:
        if self.steps is not None:
            return "steps:[" + ",".join(self.steps) + "]"
        return f"seed:{self.seed}"

    @staticmethod
    def parse(text: str) -> "Schedule":
        if text.startswith("seed:"):
            return Schedule(seed=int(text[5:]))
        m = re.match(r"steps:\[(.*)\]$", text)
        if m:
            body = m.group(1)
            return Schedule(steps=[t for t in body.split(",") if t])
        raise ValueError(f"not a schedule: {text!r}")


# Scheduler tokens.  ("run", pid) executes one atomic action of a process;
# ("dlv", src, dst) delivers the head of a pair queue; ("chan", tracer)
# delivers the head of a tracer's trace-event channel.
Token = tuple


def render_token(tok: Token) -> str:
    if tok[0] == "run":
        return tok[1].render()
    if tok[0] == "chan":
        return f"*>{tok[1].render()}"
    return f"{tok[1].render()}>{tok[2].render()}"


def parse_token(text: str) -> Token:
    if ">" in text:
        left, right = text.split(">", 1)
        if left == "*":
            return ("chan", parse_pid(right))
        return ("dlv", parse_pid(left), parse_pid(right))
    return ("run", parse_pid(text))


# ---------------------------------------------------------------------------
# Per-step effect summary (consumed by the interleaving explorer)
# ---------------------------------------------------------------------------


@dataclass(slots=True)
class StepFx:
    kind: str  # run | dlv | chan
    pid: Pid  # the runner, or the receiving process for deliveries
    forked: bool = False
    emit_tracers: tuple = ()
    trace_targets: tuple = ()
    trace_tracers: tuple = ()


# ---------------------------------------------------------------------------
# Processes
# ---------------------------------------------------------------------------

PAUSED = "paused"
RUNNABLE = "runnable"
BLOCKED = "blocked"
TERMINATED = "terminated"


class Proc:
    __slots__ = (
        "pid",
        "body",
        "gen",
        "status",
        "mailbox",
        "pending",
        "is_system",
        "sig",
        "crashed",
        "exit_reason",
        "last_sys",
        "path",
        "fork_count",
        "single_sourced",
        "spawn_seq",
    )

    def __init__(self, pid: Pid, body, paused: bool, sig: Optional[str]):
        self.pid = pid
        self.body = body
        self.gen = None
        self.status = PAUSED if paused else RUNNABLE
        self.mailbox: deque[Message] = deque()
        self.pending: Optional[Receive] = None
        self.is_system = pid.kind is PidKind.SYSTEM
        self.sig = sig
        self.crashed = False
        self.exit_reason: Optional[str] = None
        self.last_sys: Optional[SysMessage] = None
        # fork-tree coordinates: schedule- and mode-independent identity used
        # for monitor keys (pids are assigned in spawn order and are not)
        self.path: Optional[str] = None
        self.fork_count = 0
        # message-source arity hint from the scenario's static shape; the
        # explorer uses it to avoid branching on deliveries that cannot race
        self.single_sourced = False
        self.spawn_seq = 0


class Ctx:
    """Capability handle a behaviour uses to act on the world.

    Deliberately exposes no clock or step counter: process code cannot
    observe global time.
    """

    __slots__ = ("_rt", "_proc")

    def __init__(self, rt: "Runtime", proc: Proc):
        self._rt = rt
        self._proc = proc

    @property
    def self_pid(self) -> Pid:
        return self._proc.pid

    @property
    def snapshots_enabled(self) -> bool:
        return self._rt.snapshots

    @property
    def logging(self) -> bool:
        return bool(self._rt._sinks)

    def path_of(self, pid: Pid) -> str:
        """Fork-tree coordinates of a system process (reporting metadata)."""
        return self._rt.procs[pid].path

    def send(self, to: Pid, msg: Message, kind: str = "send") -> None:
        self._rt._send(self._proc.pid, to, msg, kind)

    def fork_system(self, body, sig: str, single_sourced: bool = False) -> Pid:
        child = self._rt.spawn(body, PidKind.SYSTEM, by=self._proc.pid, sig=sig)
        self._rt.procs[child].single_sourced = single_sourced
        self._rt.hook.on_fork(self._proc.pid, child, sig)
        return child

    def spawn_tracer(self, body, **meta) -> Pid:
        return self._rt.spawn(body, PidKind.TRACER, by=self._proc.pid, meta=meta)

    def spawn_analyser(self, body, **meta) -> Pid:
        return self._rt.spawn(body, PidKind.ANALYZER, by=self._proc.pid, meta=meta)

    def trace(self, p_s: Pid, p_t: Pid) -> None:
        self._rt.hook.trace(p_s, p_t, by=self._proc.pid)

    def clear(self, p_s: Pid, p_t: Pid) -> None:
        self._rt.hook.clear(p_s, p_t, by=self._proc.pid)

    def preempt(self, p_s: Pid, p_t: Optional[Pid] = None) -> None:
        self._rt.hook.preempt(p_s, p_t or self._proc.pid, by=self._proc.pid)

    def resume(self, pid: Pid) -> None:
        self._rt.resume(pid, by=self._proc.pid)

    def log(self, kind: str, **data) -> None:
        self._rt._log(self._proc.pid.render(), kind, data)

    def mark_crashed(self) -> None:
        self._proc.crashed = True

    def set_exit_reason(self, reason: str) -> None:
        self._proc.exit_reason = reason

    def reply_payload(self) -> str:
        """Payload answering the most recently consumed request."""
        got = self._proc.last_sys
        if got is None:
            raise RuntimeError(f"{self._proc.pid} has not received anything yet")
        body = got.payload
        return "p:" + body[2:] if body.startswith("q:") else "ack:" + body


# ---------------------------------------------------------------------------
# Swap-remove bag: O(1) add/discard plus O(1) indexed pick, with an order
# that is a pure function of the operation history (determinism).
# ---------------------------------------------------------------------------


class _Bag:
    __slots__ = ("items", "pos")

    def __init__(self):
        self.items: list = []
        self.pos: dict = {}

    def add(self, x) -> None:
        if x in self.pos:
            return
        self.pos[x] = len(self.items)
        self.items.append(x)

    def discard(self, x) -> None:
        i = self.pos.pop(x, None)
        if i is None:
            return
        last = self.items.pop()
        if i < len(self.items):
            self.items[i] = last
            self.pos[last] = i

    def __contains__(self, x) -> bool:
        return x in self.pos

    def __len__(self) -> int:
        return len(self.items)


# ---------------------------------------------------------------------------
# Run statistics (always on; cheap counters)
# ---------------------------------------------------------------------------


@dataclass
class RunStats:
    steps: int = 0
    messages_total: int = 0
    events_total: int = 0
    events_comm: int = 0
    routed_hops: int = 0
    sys_messages: int = 0
    deliveries: int = 0
    spawns: int = 0
    tracers_created: int = 0
    tracers_collected: int = 0
    tracers_live: int = 0
    tracers_peak: int = 0
    analysers_created: int = 0
    analysers_collected: int = 0
    analysers_live: int = 0
    mailbox_peak: int = 0


@dataclass
class RunResult:
    log: Optional[ExecutionLog]
    schedule_tokens: list[str]
    quiescent: bool
    stats: RunStats
    verdicts: dict[str, str]
    live_procs: dict[str, str]  # pid render -> status, for non-terminated procs


class _NullHook:
    """Action hook used for unmonitored runs."""

    def on_fork(self, parent: Pid, child: Pid, sig: str) -> None:
        pass

    def on_exit(self, pid: Pid) -> None:
        pass

    def on_send(self, src: Pid, dst: Pid) -> None:
        pass

    def on_recv(self, pid: Pid) -> None:
        pass

    def finish(self) -> None:
        pass


# ---------------------------------------------------------------------------
# The runtime
# ---------------------------------------------------------------------------


class Runtime:
    def __init__(
        self,
        *,
        retain_log: bool = True,
        sinks: Optional[list[LogSink]] = None,
        snapshots: bool = True,
        capture_errors: bool = False,
        step_cap: int = DEFAULT_STEP_CAP,
        record_effects: bool = False,
        interventions: Optional[dict[int, Callable[["Runtime"], None]]] = None,
        stable_pids: bool = False,
    ):
        self.log = ExecutionLog() if retain_log else None
        self._sinks: list[LogSink] = list(sinks or ())
        if self.log is not None:
            self._sinks.append(self.log.append)
        self.snapshots = snapshots
        self.capture_errors = capture_errors
        # hierarchical serials make pid assignment independent of spawn
        # interleaving, letting the explorer treat concurrent forks as
        # commuting; serials grow quadratically with tree depth, so this is
        # only for small exhaustively checked scenarios
        self.stable_pids = stable_pids
        self.step_cap = step_cap
        self.record_effects = record_effects
        self.interventions = interventions or {}

        self.procs: dict[Pid, Proc] = {}
        self.pairs: dict[tuple[Pid, Pid], deque] = {}
        self.channels: dict[Pid, deque] = {}
        self._serial = 0
        self._run_bag = _Bag()
        self._dlv_bag = _Bag()
        self.stats = RunStats()
        self.verdicts: dict[str, str] = {}
        self.hook = _NullHook()
        self.steps_done = 0
        self.last_fx: Optional[StepFx] = None
        self._fx: Optional[StepFx] = None

    # -- logging ------------------------------------------------------------

    @property
    def logging(self) -> bool:
        return bool(self._sinks)

    def _log(self, pid: str, kind: str, data: dict) -> None:
        if kind == "final_verdict":
            self.verdicts[data["key"]] = data["v"]
        if not self._sinks:
            return
        entry = LogEntry(self.steps_done, pid, kind, data)
        for sink in self._sinks:
            sink(entry)

    # -- process management ---------------------------------------------------

    def spawn(
        self,
        body,
        kind: PidKind,
        *,
        by: Optional[Pid] = None,
        paused: bool = False,
        sig: Optional[str] = None,
        meta: Optional[dict] = None,
    ) -> Pid:
        if self.stable_pids and by is not None:
            parent = self.procs[by]
            serial = 16 + _szudzik(by.serial, parent.spawn_seq)
            parent.spawn_seq += 1
        else:
            self._serial += 1
            serial = self._serial
        pid = Pid(serial, kind)
        proc = Proc(pid, body, paused, sig)
        self.procs[pid] = proc
        if kind is PidKind.SYSTEM:
            parent = self.procs.get(by) if by is not None else None
            if parent is not None and parent.is_system:
                proc.path = f"{parent.path}.{parent.fork_count}"
                parent.fork_count += 1
            else:
                proc.path = "0"
        if not paused:
            self._run_bag.add(("run", pid))
        if self._sinks:
            data = {"by": by.render() if by else "-"}
            if proc.path is not None:
                data["path"] = proc.path
            if sig is not None:
                data["sig"] = sig
            if paused:
                data["paused"] = "1"
            if meta:
                data.update({k: (v.render() if isinstance(v, Pid) else str(v)) for k, v in meta.items()})
            self._log(pid.render(), "spawn", data)
        st = self.stats
        st.spawns += 1
        if kind is PidKind.TRACER:
            st.tracers_created += 1
            st.tracers_live += 1
            st.tracers_peak = max(st.tracers_peak, st.tracers_live)
        elif kind is PidKind.ANALYZER:
            st.analysers_created += 1
            st.analysers_live += 1
        if self._fx is not None:
            self._fx.forked = True
        return pid

    def resume(self, pid: Pid, by: Optional[Pid] = None) -> None:
        proc = self.procs[pid]
        if proc.status != PAUSED:
            raise RuntimeError(f"{pid} is not paused")
        proc.status = RUNNABLE
        self._run_bag.add(("run", pid))
        if self._sinks:
            self._log(pid.render(), "resume", {"by": by.render() if by else "-"})

    def kill(self, pid: Pid, reason: str = "halted") -> None:
        proc = self.procs[pid]
        if proc.status == TERMINATED:
            return
        proc.status = TERMINATED
        self._run_bag.discard(("run", pid))
        if self._sinks:
            self._log(pid.render(), "terminate", {"reason": reason})
        self._account_death(pid)

    def _account_death(self, pid: Pid) -> None:
        st = self.stats
        if pid.kind is PidKind.TRACER:
            st.tracers_collected += 1
            st.tracers_live -= 1
        elif pid.kind is PidKind.ANALYZER:
            st.analysers_collected += 1
            st.analysers_live -= 1

    # -- messaging ------------------------------------------------------------

    def _send(self, src: Pid, dst: Pid, msg: Message, kind: str) -> None:
        key = (src, dst)
        q = self.pairs.get(key)
        if q is None:
            q = self.pairs[key] = deque()
        q.append(msg)
        self._dlv_bag.add(("dlv", src, dst))
        if self._sinks:
            self._log(src.render(), kind, {"to": dst.render(), "msg": render_message(msg)})
        st = self.stats
        st.messages_total += 1
        if kind in ("route", "forwd"):
            st.routed_hops += 1
        if isinstance(msg, SysMessage):
            st.sys_messages += 1
            if src.kind is PidKind.SYSTEM:
                self.hook.on_send(src, dst)

    def enqueue_event(self, tracer: Pid, ev, src: Pid) -> None:
        """Append a trace event to a tracer's inbound event channel.

        The channel is a single FIFO per tracer, so events reach each tracer
        in emission order (a forked child's events can never overtake the
        fork event that created it), while delivery timing stays under
        scheduler control.
        """
        chan = self.channels.get(tracer)
        if chan is None:
            chan = self.channels[tracer] = deque()
        chan.append(ev)
        self._dlv_bag.add(("chan", tracer))
        if self._sinks:
            self._log(src.render(), "emit", {"to": tracer.render(), "msg": render_message(ev)})
        st = self.stats
        st.messages_total += 1
        st.events_total += 1
        if ev.act.value in ("snd", "rcv"):
            st.events_comm += 1
        if self._fx is not None:
            self._fx.emit_tracers += (tracer,)

    def _deposit(self, dst: Pid, msg: Message, src_render: str, flush: bool) -> None:
        proc = self.procs[dst]
        proc.mailbox.append(msg)
        if len(proc.mailbox) > self.stats.mailbox_peak:
            self.stats.mailbox_peak = len(proc.mailbox)
        if self._sinks:
            data = {"to": dst.render(), "msg": render_message(msg)}
            if flush:
                data["flush"] = "1"
            if proc.status == TERMINATED:
                data["absorbed"] = "1"
            self._log(src_render, "deliver", data)
        self.stats.deliveries += 1
        if proc.status == BLOCKED and self._candidate_arrived(proc, msg):
            proc.status = RUNNABLE
            self._run_bag.add(("run", dst))

    @staticmethod
    def _candidate_arrived(proc: Proc, msg: Message) -> bool:
        pending = proc.pending
        if pending is None:
            return False
        return pending.match is None or bool(pending.match(msg))

    def flush_channel(self, tracer: Pid, drop_src: Optional[Pid] = None) -> int:
        """Deliver a tracer's whole event channel into its mailbox, in order.

        ``drop_src`` discards that process's events instead of delivering
        them (fault-injection hook for the lost-flush mutation).
        """
        chan = self.channels.get(tracer)
        moved = 0
        dropped = 0
        if chan:
            while chan:
                ev = chan.popleft()
                if drop_src is not None and ev.src == drop_src:
                    dropped += 1
                    continue
                self._deposit(tracer, ev, ev.src.render(), flush=True)
                moved += 1
            self._dlv_bag.discard(("chan", tracer))
        if dropped:
            self._log(tracer.render(), "flush", {"dropped": str(dropped)})
        if self._fx is not None:
            self._fx.trace_tracers += (tracer,)
        return moved

    # -- scheduling ------------------------------------------------------------

    def enabled_tokens(self) -> list[Token]:
        """All currently enabled scheduler actions, in canonical order."""
        runs = sorted(
            (tok for tok in self._run_bag.items),
            key=lambda tok: tok[1].serial,
        )
        chans = sorted(
            (tok for tok in self._dlv_bag.items if tok[0] == "chan"),
            key=lambda tok: tok[1].serial,
        )
        dlvs = sorted(
            (tok for tok in self._dlv_bag.items if tok[0] == "dlv"),
            key=lambda tok: (tok[1].serial, tok[2].serial),
        )
        return runs + chans + dlvs

    def token_enabled(self, tok: Token) -> bool:
        if tok[0] == "run":
            return tok in self._run_bag
        return tok in self._dlv_bag

    def quiescent(self) -> bool:
        return not self._run_bag.items and not self._dlv_bag.items

    def step(self, tok: Token) -> None:
        """Execute one scheduler action; raises if the token is not enabled."""
        if not self.token_enabled(tok):
            raise InvalidScheduleStep(f"{render_token(tok)} is not enabled")
        hook = self.interventions.get(self.steps_done) if self.interventions else None
        if hook is not None:
            hook(self)
            if not self.token_enabled(tok):
                # the intervention disabled the chosen action; record and move on
                if self._sinks:
                    self._log("-", "sched", {"tok": render_token(tok), "void": "1"})
                self.steps_done += 1
                self.stats.steps += 1
                return
        if self.record_effects:
            self._fx = StepFx(kind=tok[0], pid=tok[1] if tok[0] != "dlv" else tok[2])
        if self._sinks:
            self._log("-", "sched", {"tok": render_token(tok)})
        if tok[0] == "run":
            self._exec_run(self.procs[tok[1]])
        elif tok[0] == "chan":
            tracer = tok[1]
            chan = self.channels[tracer]
            ev = chan.popleft()
            if not chan:
                self._dlv_bag.discard(tok)
            self._deposit(tracer, ev, ev.src.render(), flush=False)
        else:
            _, src, dst = tok
            q = self.pairs[(src, dst)]
            msg = q.popleft()
            if not q:
                self._dlv_bag.discard(tok)
            self._deposit(dst, msg, src.render(), flush=False)
        self.steps_done += 1
        self.stats.steps += 1
        if self.record_effects:
            self.last_fx = self._fx
            self._fx = None

    def _exec_run(self, proc: Proc) -> None:
        if proc.gen is None:
            proc.gen = proc.body(Ctx(self, proc))
            self._advance(proc, None)
        elif proc.pending is not None:
            msg = self._take_message(proc)
            if self._sinks:
                data = {"msg": render_message(msg)}
                if self.snapshots:
                    data["mb"] = ";".join(render_message(m) for m in proc.mailbox) or "-"
                self._log(proc.pid.render(), "consume", data)
            proc.pending = None
            if proc.is_system and isinstance(msg, SysMessage):
                proc.last_sys = msg
                self.hook.on_recv(proc.pid)
            self._advance(proc, msg)
        else:
            self._advance(proc, None)

    def _take_message(self, proc: Proc) -> Message:
        match = proc.pending.match
        if match is None:
            return proc.mailbox.popleft()
        for i, msg in enumerate(proc.mailbox):
            if match(msg):
                del proc.mailbox[i]
                return msg
        raise InvalidScheduleStep(f"{proc.pid} scheduled with no matching message")

    def _advance(self, proc: Proc, value) -> None:
        try:
            effect = proc.gen.send(value)
        except StopIteration:
            self._finish(proc)
            return
        except ProtocolViolation as exc:
            if not self.capture_errors:
                raise
            self._log(
                proc.pid.render(),
                "protocol_error",
                {"error": type(exc).__name__, "detail": str(exc)},
            )
            proc.status = TERMINATED
            self._run_bag.discard(("run", proc.pid))
            self._log(proc.pid.render(), "terminate", {"reason": "error"})
            self._account_death(proc.pid)
            return
        if isinstance(effect, Receive):
            proc.pending = effect
            if not self._has_candidate(proc):
                proc.status = BLOCKED
                self._run_bag.discard(("run", proc.pid))
        elif isinstance(effect, Yield):
            pass
        else:
            raise TypeError(f"behaviour yielded {effect!r}")

    @staticmethod
    def _has_candidate(proc: Proc) -> bool:
        match = proc.pending.match
        if match is None:
            return bool(proc.mailbox)
        return any(match(m) for m in proc.mailbox)

    def _finish(self, proc: Proc) -> None:
        if proc.is_system:
            self.hook.on_exit(proc.pid)
        reason = proc.exit_reason or ("crash" if proc.crashed else "exit")
        proc.status = TERMINATED
        self._run_bag.discard(("run", proc.pid))
        if self._sinks:
            self._log(proc.pid.render(), "terminate", {"reason": reason})
        self._account_death(proc.pid)

    # -- whole-run driving -------------------------------------------------------

    def run(self, schedule: Schedule) -> RunResult:
        tokens: list[str] = []
        if schedule.steps is not None:
            for text in schedule.steps:
                tok = parse_token(text)
                self.step(tok)
                tokens.append(text)
                if self.steps_done > self.step_cap:
                    raise StepCapExceeded(f"exceeded {self.step_cap} steps")
            if not self.quiescent():
                raise ScheduleExhausted(
                    f"schedule ended after {len(tokens)} steps with work remaining"
                )
        else:
            rng = random.Random(schedule.seed)
            while not self.quiescent():
                n_run = len(self._run_bag)
                i = rng.randrange(n_run + len(self._dlv_bag))
                tok = self._run_bag.items[i] if i < n_run else self._dlv_bag.items[i - n_run]
                self.step(tok)
                tokens.append(render_token(tok))
                if self.steps_done > self.step_cap:
                    raise StepCapExceeded(f"exceeded {self.step_cap} steps")
        self.hook.finish()
        live = {
            p.pid.render(): p.status
            for p in self.procs.values()
            if p.status != TERMINATED
        }
        if self._sinks:
            self._log("-", "quiescent", {"steps": str(self.steps_done), "live": str(len(live))})
        return RunResult(
            log=self.log,
            schedule_tokens=tokens,
            quiescent=True,
            stats=self.stats,
            verdicts=dict(self.verdicts),
            live_procs=live,
        )
