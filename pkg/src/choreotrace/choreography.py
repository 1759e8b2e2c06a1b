"""Tracer choreography: routing, hand-off, and self-collection.

Each tracer owns three pieces of state: a routing map (which neighbour
handles events of processes that are not its own), the instrumentation map
(which code signatures deserve a dedicated tracer), and a traced-processes
map (the processes whose events it analyses, tagged with their hand-off
status).

A tracer is born in priority mode: it consumes only routed messages, so
events collected on its behalf by the tracer it preempted are analysed
before anything it collects directly.  Taking over a process works by
preempting its tracing and then sending a detach command to the router;
since preemption flushes all in-flight events into the router's mailbox
first, the command always trails them.  When the command makes its way
back, the process is marked handed off; once no pending hand-offs remain
the tracer switches to direct mode.  Routing chains shrink as detach
commands travel through them (each hop drops its route), and a tracer with
no routes and no traced processes collects itself.

Fault injection: ``MUTATIONS`` lists single-decision deviations that can be
switched on per run to exercise the offline checkers.  With mutations
active, protocol violations are captured into the log instead of raised.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

from .analysis import MonitorSpec, RecognizerAutomaton, analyser_body, compile_monitor
from .errors import (
    DtcProtocolViolation,
    MisdirectedDtc,
    OrphanRoutedEvent,
    UnknownProcess,
    UnknownQualifier,
)
from .model import (
    DIRECT,
    PRIORITY,
    Action,
    DetachCommand,
    Message,
    Pid,
    PidKind,
    RoutedMessage,
    Signature,
    StopSignal,
    TraceEvent,
    TracerState,
    qualifier,
    render_message,
    render_pid_map,
    wrap_routed,
)
from .runtime import RECEIVE_ANY, Ctx, Receive, Runtime

#: Externalised vs internalised analysis: "ea" forks one analyser process per
#: tracer, "ia" steps the automaton inside the tracer itself.
VARIANTS = ("ea", "ia")

#: The curated single-decision protocol mutations (fault injection surface).
MUTATIONS = (
    "skip_route_add_on_route",  # route a fork event without recording the child route
    "skip_route_delete_on_route_dtc",  # keep the route after routing a detach command
    "forward_instead_of_route",  # send kept-for-others events unwrapped
    "wrong_router_for_new_tracer",  # instrument from priority mode with self as router
    "no_priority_mode",  # newborn tracers start in direct mode
    "no_detach",  # never take over tracing (no preempt, no command)
    "no_flush_in_clear",  # drop in-flight events instead of flushing them
    "no_gc",  # never self-collect
    "analyse_routed_in_direct",  # direct mode analyses routed events instead of forwarding
    "drop_dtc",  # take over tracing but never tell the router
)

#: Handler branches of the tracer loops; full coverage of these is one of
#: the exhaustive checker's outputs.
COVERAGE_BRANCHES = frozenset(
    {
        "fork_route",
        "fork_analyse",
        "exit_route",
        "exit_analyse",
        "comm_route",
        "comm_analyse",
        "route_dtc",
        "forwd_dtc",
        "forwd_evt",
        "forwd_evt_fork",
        "fork_forwd",
        "fork_analyse_pri",
        "exit_forwd",
        "exit_analyse_pri",
        "comm_forwd",
        "comm_analyse_pri",
        "dtc_forwd",
        "dtc_mark",
        "dtc_switch",
        "instrument_spawn_dir",
        "instrument_share_dir",
        "instrument_spawn_pri",
        "instrument_share_pri",
    }
)


@dataclass
class _Tracer:
    """Everything one tracer process carries between handler invocations."""

    ctx: Ctx
    st: TracerState
    variant: str
    mutations: frozenset[str]
    machine: Optional[RecognizerAutomaton] = None  # internalised analysis only
    key: Optional[str] = None
    is_root: bool = False

    def mut(self, name: str) -> bool:
        return name in self.mutations


def _is_rtd(msg: Message) -> bool:
    return isinstance(msg, RoutedMessage)


RECEIVE_RTD = Receive(match=_is_rtd)


# ---------------------------------------------------------------------------
# System start-up
# ---------------------------------------------------------------------------


def start(
    rt: Runtime,
    top_body,
    top_sig: Signature,
    monitor_map: Mapping[Signature, MonitorSpec],
    variant: str,
    mutations: frozenset[str] = frozenset(),
) -> tuple[Pid, Pid]:
    """Launch the system under scrutiny together with its root tracer.

    The top-level process starts paused so the root tracer can bind to it
    before it acts: no initial event can be lost.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown analysis variant {variant!r}")
    p_s = rt.spawn(top_body, PidKind.SYSTEM, paused=True, sig=top_sig)
    p_t = rt.spawn(
        _root_body(p_s, monitor_map, variant, mutations),
        PidKind.TRACER,
        meta={"root": 1},
    )
    return p_s, p_t


def _root_body(p_s: Pid, monitor_map, variant: str, mutations: frozenset[str]):
    def body(ctx: Ctx):
        ctx.trace(p_s, ctx.self_pid)
        ctx.resume(p_s)
        st = TracerState(
            self_pid=ctx.self_pid,
            routing={},
            monitor_map=monitor_map,
            traced={p_s: DIRECT},
            mode=DIRECT,
        )
        # The root analyses without a monitor: its events are logged and
        # discarded.  Dedicated tracers appear only on descendant forks.
        tp = _Tracer(ctx, st, variant, mutations, is_root=True)
        _snapshot(tp, "init")
        yield from _loop(tp)

    return body


def _tracer_body(
    monitor_map,
    spec: MonitorSpec,
    first_proc: Pid,
    router: Pid,
    variant: str,
    mutations: frozenset[str],
    key: str,
):
    """Body of a newly instrumented tracer (the forked half of instrument)."""

    def body(ctx: Ctx):
        st = TracerState(
            self_pid=ctx.self_pid,
            routing={},
            monitor_map=monitor_map,
            traced={first_proc: PRIORITY},
            mode=PRIORITY,
        )
        tp = _Tracer(ctx, st, variant, mutations, key=key)
        _detach(tp, first_proc, router)
        if variant == "ea":
            st.analyzer = ctx.spawn_analyser(
                analyser_body(spec, first_proc, key), owner=ctx.self_pid, key=key
            )
        else:
            tp.machine = compile_monitor(spec, owner=first_proc)
        if tp.mut("no_priority_mode"):
            st.mode = DIRECT
            st.traced[first_proc] = DIRECT
        _snapshot(tp, "init")
        yield from _loop(tp)

    return body


# ---------------------------------------------------------------------------
# Main loops
# ---------------------------------------------------------------------------


def _loop(tp: _Tracer):
    """Dispatch loop; priority mode consumes only routed messages."""
    st = tp.st
    while st.alive:
        if st.mode == PRIORITY:
            msg = yield RECEIVE_RTD
            emb = msg.emb
            if isinstance(emb, TraceEvent):
                branch = _handle_event_priority(tp, msg)
            elif isinstance(emb, DetachCommand):
                branch = _handle_dtc(tp, msg)
            else:
                raise UnknownQualifier(f"routed {qualifier(emb)}")
        else:
            msg = yield RECEIVE_ANY
            if isinstance(msg, TraceEvent):
                branch = _handle_event_direct(tp, msg)
            elif isinstance(msg, DetachCommand):
                branch = _route_dtc(tp, msg)
            elif isinstance(msg, RoutedMessage):
                branch = _forwd_rtd(tp, msg)
            else:
                raise UnknownQualifier(f"tracer got {qualifier(msg)}")
        _snapshot(tp, branch)


def _handle_event_direct(tp: _Tracer, e: TraceEvent) -> str:
    st = tp.st
    hop = st.routing.get(e.src)
    if e.act is Action.FRK:
        if hop is not None:
            _route(tp, e, hop)
            # the child's events will reach its tracer via the same next hop
            if not tp.mut("skip_route_add_on_route"):
                st.route_add(e.tgt, hop)
            return "fork_route"
        _analyse(tp, e)
        _instrument(tp, e, router=tp.ctx.self_pid, priority=False)
        return "fork_analyse"
    if e.act is Action.EXT:
        if hop is not None:
            _route(tp, e, hop)
            return "exit_route"
        _analyse(tp, e)
        if e.src not in st.traced:
            raise UnknownProcess(f"{st.self_pid} got exit of unowned {e.src}")
        st.traced_del(e.src)
        _try_gc(tp)
        return "exit_analyse"
    if hop is not None:
        _route(tp, e, hop)
        return "comm_route"
    _analyse(tp, e)
    return "comm_analyse"


def _handle_event_priority(tp: _Tracer, r: RoutedMessage) -> str:
    st = tp.st
    e = r.emb
    hop = st.routing.get(e.src)
    if e.act is Action.FRK:
        if hop is not None:
            _forwd(tp, r, hop)
            st.route_add(e.tgt, hop)
            return "fork_forwd"
        _analyse(tp, e)
        router = tp.ctx.self_pid if tp.mut("wrong_router_for_new_tracer") else r.rtr
        _instrument(tp, e, router=router, priority=True)
        return "fork_analyse_pri"
    if e.act is Action.EXT:
        if hop is not None:
            _forwd(tp, r, hop)
            return "exit_forwd"
        _analyse(tp, e)
        if e.src not in st.traced:
            raise UnknownProcess(f"{st.self_pid} got routed exit of unowned {e.src}")
        st.traced_del(e.src)
        _try_gc(tp)
        return "exit_analyse_pri"
    if hop is not None:
        _forwd(tp, r, hop)
        return "comm_forwd"
    _analyse(tp, e)
    return "comm_analyse_pri"


def _route_dtc(tp: _Tracer, c: DetachCommand) -> str:
    """Wrap a detach command back toward its issuer, dropping the route."""
    st = tp.st
    hop = st.routing.get(c.tgt)
    if hop is None:
        raise MisdirectedDtc(f"{st.self_pid} has no route for detach of {c.tgt}")
    _route(tp, c, hop)
    if not tp.mut("skip_route_delete_on_route_dtc"):
        st.route_del(c.tgt)
    _try_gc(tp)
    return "route_dtc"


def _forwd_rtd(tp: _Tracer, r: RoutedMessage) -> str:
    """Direct mode pass-through of routed messages."""
    st = tp.st
    emb = r.emb
    if isinstance(emb, DetachCommand):
        hop = st.routing.get(emb.tgt)
        if hop is None:
            if emb.iss == tp.ctx.self_pid:
                # our own acknowledgement arriving after the mode switch:
                # the process it hands over was already analysed as exited,
                # so there is nothing to flip and nothing to forward
                return "forwd_dtc_stale"
            raise MisdirectedDtc(f"{st.self_pid} cannot forward detach of {emb.tgt}")
        _forwd(tp, r, hop)
        st.route_del(emb.tgt)
        _try_gc(tp)
        return "forwd_dtc"
    if tp.mut("analyse_routed_in_direct"):
        _analyse(tp, emb)
        return "analyse_routed_mut"
    hop = st.routing.get(emb.src)
    if hop is None:
        raise OrphanRoutedEvent(f"{st.self_pid} got routed {emb.act.value} of {emb.src} with no route")
    _forwd(tp, r, hop)
    if emb.act is Action.FRK:
        st.route_add(emb.tgt, hop)
        return "forwd_evt_fork"
    return "forwd_evt"


def _handle_dtc(tp: _Tracer, r: RoutedMessage) -> str:
    """Priority-mode handling of a routed detach command."""
    st = tp.st
    c = r.emb
    hop = st.routing.get(c.tgt)
    if hop is not None:
        _forwd(tp, r, hop)
        # every hop purges its route once the command passes through; a
        # tracer that kept it could never collect itself
        st.route_del(c.tgt)
        _try_gc(tp)
        return "dtc_forwd"
    if c.iss != tp.ctx.self_pid:
        raise DtcProtocolViolation(f"{st.self_pid} got foreign detach {render_message(c)}")
    flipped = st.mark_detached(c.tgt)
    if not st.has_priority_entries():
        st.mode = DIRECT
        tp.ctx.log("mode", to=DIRECT)
        return "dtc_switch"
    # stale: the routed exit of this process was analysed before the
    # command returned, so there is nothing left to flip
    return "dtc_mark" if flipped else "dtc_mark_stale"


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def _instrument(tp: _Tracer, e: TraceEvent, router: Pid, priority: bool) -> None:
    """Decide what happens to a freshly forked process.

    Mapped signature: fork a dedicated tracer (which will take the process
    over) and route its events there.  Unmapped: the process shares this
    tracer; from priority mode that still requires taking it over from the
    router collecting its events.
    """
    st = tp.st
    spec = st.monitor_map.get(e.sig)
    if spec is not None:
        key = f"{tp.ctx.path_of(e.tgt)}/{e.sig}"
        child = tp.ctx.spawn_tracer(
            _tracer_body(st.monitor_map, spec, e.tgt, router, tp.variant, tp.mutations, key),
            first=e.tgt,
            router=router,
            key=key,
        )
        st.route_add(e.tgt, child)
        branch = "instrument_spawn_pri" if priority else "instrument_spawn_dir"
        if tp.ctx.logging:
            tp.ctx.log(
                "instrument",
                new=child.render(),
                first=e.tgt.render(),
                router=router.render(),
                sig=e.sig,
                branch=branch,
            )
    elif priority:
        _detach(tp, e.tgt, router)
        st.traced_add(e.tgt, PRIORITY)
        if tp.ctx.logging:
            tp.ctx.log("instrument", first=e.tgt.render(), router=router.render(), sig=e.sig, branch="instrument_share_pri")
    else:
        # nothing to detach: the process inherited this very tracer
        st.traced_add(e.tgt, DIRECT)
        if tp.ctx.logging:
            tp.ctx.log("instrument", first=e.tgt.render(), sig=e.sig, branch="instrument_share_dir")


def _detach(tp: _Tracer, p_s: Pid, router: Pid) -> None:
    """Take over tracing of a process and tell its current router.

    Preemption flushes every in-flight event of the process into the
    router's mailbox before the command is sent, so the command always
    arrives after them.
    """
    if tp.mut("no_detach"):
        return
    tp.ctx.preempt(p_s)
    if tp.mut("drop_dtc"):
        return
    tp.ctx.send(router, DetachCommand(iss=tp.ctx.self_pid, tgt=p_s))


def _try_gc(tp: _Tracer) -> None:
    """Self-collect once nothing is traced here and nothing routes through."""
    st = tp.st
    if tp.mut("no_gc"):
        return
    if st.routing or st.traced:
        return
    if st.analyzer is not None:
        tp.ctx.send(st.analyzer, StopSignal())
    if tp.machine is not None:
        tp.ctx.log("final_verdict", key=tp.key, v=tp.machine.verdict().value)
    tp.ctx.set_exit_reason("gc")
    st.alive = False


def _analyse(tp: _Tracer, e: TraceEvent) -> None:
    """Hand one event to analysis (dispatch, inline step, or root discard)."""
    if tp.ctx.logging:
        tp.ctx.log("analyse", msg=render_message(e))
    st = tp.st
    if st.analyzer is not None:
        tp.ctx.send(st.analyzer, e)
    elif tp.machine is not None:
        before = tp.machine.flagged
        tp.machine.step(e)
        if tp.machine.flagged is not None and before is None:
            tp.ctx.log("verdict", key=tp.key, v=tp.machine.flagged.value)


def _route(tp: _Tracer, m: Message, hop: Pid) -> None:
    """Wrap a directly collected message and send it one hop onward."""
    if tp.mut("forward_instead_of_route"):
        tp.ctx.send(hop, m, kind="route")
        return
    tp.ctx.send(hop, wrap_routed(m, tp.ctx.self_pid), kind="route")


def _forwd(tp: _Tracer, r: RoutedMessage, hop: Pid) -> None:
    """Pass a routed message on verbatim; the original router tag survives."""
    tp.ctx.send(hop, r, kind="forwd")


def _snapshot(tp: _Tracer, branch: str) -> None:
    if not (tp.ctx.snapshots_enabled and tp.ctx.logging):
        return
    st = tp.st
    tp.ctx.log(
        "tstate",
        branch=branch,
        mode=st.mode,
        pi=render_pid_map(st.routing),
        gamma=render_pid_map(st.traced),
    )
