"""Trace-binding substrate: who traces whom, and event generation.

Binds tracers to system processes, turns system actions into trace events,
and enforces the three binding rules every run relies on:

* a system process has at most one tracer at any time,
* a tracer may trace many processes at once,
* a forked process automatically inherits its parent's tracer, atomically
  with the fork itself.

Events travel to each tracer over a single FIFO channel owned by the
runtime, so they arrive in emission order; delivery timing is still a
scheduler choice.  CLEAR realises its blocking contract by draining the
old tracer's channel into its mailbox within the calling step, which is
what makes the detach handshake ordering sound: by the time the detach
command is even sent, every already-emitted event of the process sits in
the router's mailbox.
"""

from __future__ import annotations

from typing import Optional

from .errors import AlreadyTraced, NotTraced
from .model import Action, Pid, mk_event
from .runtime import Runtime

#: Mutation switch handled here (see choreography.MUTATIONS for the full set).
M_NO_FLUSH = "no_flush_in_clear"


class TraceTable:
    """Runtime action hook implementing the native-tracing analogue."""

    def __init__(self, rt: Runtime, mutations: frozenset[str] = frozenset()):
        self._rt = rt
        self._mutations = mutations
        self.table: dict[Pid, Pid] = {}
        self._seq: dict[Pid, int] = {}

    # -- binding management ---------------------------------------------------

    def binding(self, p_s: Pid) -> Optional[Pid]:
        return self.table.get(p_s)

    def pending_events(self, p_s: Pid, p_t: Pid) -> list:
        """Emitted-but-undelivered events of one pair, in emission order."""
        chan = self._rt.channels.get(p_t)
        if not chan:
            return []
        return [ev for ev in chan if ev.src == p_s]

    def trace(self, p_s: Pid, p_t: Pid, by: Optional[Pid] = None) -> None:
        if p_s in self.table:
            raise AlreadyTraced(f"{p_s} is already traced by {self.table[p_s]}")
        self.table[p_s] = p_t
        self._fx_target(p_s)
        if self._rt.logging:
            self._rt._log(
                (by or p_t).render(), "bind", {"proc": p_s.render(), "tracer": p_t.render()}
            )

    def clear(self, p_s: Pid, p_t: Pid, by: Optional[Pid] = None) -> None:
        if self.table.get(p_s) != p_t:
            raise NotTraced(f"{p_s} is not traced by {p_t}")
        drop = p_s if M_NO_FLUSH in self._mutations else None
        moved = self._rt.flush_channel(p_t, drop_src=drop)
        del self.table[p_s]
        self._fx_target(p_s)
        if self._rt.logging:
            self._rt._log(
                (by or p_t).render(),
                "unbind",
                {"proc": p_s.render(), "tracer": p_t.render(), "flushed": str(moved)},
            )

    def preempt(self, p_s: Pid, p_new: Pid, by: Optional[Pid] = None) -> None:
        """Atomic takeover: CLEAR the old binding, TRACE the new one.

        No action of ``p_s`` can be scheduled in between because the whole
        operation runs inside one atomic step of the calling tracer.
        """
        old = self.table.get(p_s)
        if old is None:
            raise NotTraced(f"{p_s} has no tracer to preempt")
        if self._rt.logging:
            self._rt._log(
                (by or p_new).render(),
                "preempt",
                {"proc": p_s.render(), "old": old.render(), "new": p_new.render()},
            )
        self.clear(p_s, old, by=by)
        self.trace(p_s, p_new, by=by)

    # -- event generation (invoked by the runtime on system actions) ----------

    def on_fork(self, parent: Pid, child: Pid, sig: str) -> None:
        tracer = self.table.get(parent)
        if tracer is None:
            return
        self._emit(parent, Action.FRK, tgt=child, sig=sig, tracer=tracer)
        # Inheritance happens in the same atomic step as the fork: the child
        # can never act untraced before the binding exists.
        self.table[child] = tracer
        if self._rt.logging:
            self._rt._log(
                child.render(), "bind", {"proc": child.render(), "tracer": tracer.render(), "auto": "1"}
            )

    def on_exit(self, pid: Pid) -> None:
        tracer = self.table.get(pid)
        if tracer is not None:
            self._emit(pid, Action.EXT, tracer=tracer)

    def on_send(self, src: Pid, dst: Pid) -> None:
        tracer = self.table.get(src)
        if tracer is not None:
            self._emit(src, Action.SND, tgt=dst, tracer=tracer)

    def on_recv(self, pid: Pid) -> None:
        tracer = self.table.get(pid)
        if tracer is not None:
            self._emit(pid, Action.RCV, tracer=tracer)

    def finish(self) -> None:
        pass

    def _emit(
        self,
        src: Pid,
        act: Action,
        tgt: Optional[Pid] = None,
        sig: Optional[str] = None,
        tracer: Pid = None,
    ) -> None:
        seq = self._seq.get(src, 0)
        self._seq[src] = seq + 1
        ev = mk_event(act, src, tgt, sig, seq)
        self._rt.enqueue_event(tracer, ev, src)

    def _fx_target(self, p_s: Pid) -> None:
        if self._rt._fx is not None:
            self._rt._fx.trace_targets += (p_s,)
