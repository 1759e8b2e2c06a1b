"""Exhaustive exploration of scheduler nondeterminism.

Enumerates maximal schedules of a scenario by depth-first search over the
runtime's enabled actions, replaying the prefix after each backtrack (runs
are deterministic, so replay is exact).

Reduction levels:

* ``none``: every interleaving, literally.  Only feasible for toy
  scenarios (n independent one-step processes yield n! schedules).
* ``sleep``: sound partial-order reduction with sleep sets alone.  Every
  state still branches on all non-sleeping enabled actions, so the search
  wastes work entering branches whose classes are already covered, but its
  completeness argument is direct.
* ``dpor`` (default): dynamic partial-order reduction layered under the
  same sleep sets.  A state initially explores a single action; whenever a
  later step races with an earlier one (dependent actions that could have
  run the other way around), the earlier state gains a backtrack point.
  Explores exactly the same behaviour classes as ``sleep`` while skipping
  most redundant branches; the test suite cross-validates the two.

Two actions are *dependent* when their order can change the resulting
state: actions of one process, deliveries into one mailbox, forks (pid
assignment is global unless the runtime uses stable hierarchical pids),
event emission versus a channel drain, anything touching the binding of
one process.  Equivalence classes of dependent-action orderings are
enumerated completely; commuting shuffles of independent actions are
visited once.

Additionally, analyser processes never fork, never send, and have a single
message source, and deliveries to statically single-sender system
processes cannot race with anything, so both are scheduled eagerly instead
of branching.  The schedules produced remain complete token sequences that
replay through the ordinary runtime.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

from .errors import DepthCapExceeded, ExplosionGuard
from .model import PidKind
from .runtime import Runtime, Schedule, StepFx, Token, render_token

DEFAULT_DEPTH_CAP = 100_000
DEFAULT_GUARD = 1_000_000

REDUCTIONS = ("none", "sleep", "dpor")


def dependent(a: StepFx, b: StepFx, commute_forks: bool = False) -> bool:
    """Conservative may-conflict relation between two executed actions.

    ``commute_forks`` is sound only on runtimes with stable (hierarchical)
    pid assignment, where the pids a fork hands out do not depend on how
    concurrent forks interleave.
    """
    a_run = a.kind == "run"
    b_run = b.kind == "run"
    if a_run and b_run:
        if a.pid == b.pid:
            return True
        if a.forked and b.forked and not commute_forks:
            return True  # pid serials are assigned in spawn order
        if a.trace_targets and b.trace_targets and set(a.trace_targets) & set(b.trace_targets):
            return True
        if b.pid in a.trace_targets or a.pid in b.trace_targets:
            return True  # re-binding a process races with its own actions
        if a.emit_tracers and b.trace_tracers and set(a.emit_tracers) & set(b.trace_tracers):
            return True
        if b.emit_tracers and a.trace_tracers and set(b.emit_tracers) & set(a.trace_tracers):
            return True
        if a.trace_tracers and b.trace_tracers and set(a.trace_tracers) & set(b.trace_tracers):
            return True
        return False
    if not a_run and not b_run:
        return a.pid == b.pid  # same destination mailbox
    run_fx, dlv_fx = (a, b) if b.kind != "run" else (b, a)
    # a flush delivers into that tracer's mailbox, so it races with any
    # other delivery to the same tracer
    return dlv_fx.pid in run_fx.trace_tracers


def _inert(tok: Token, rt: Runtime) -> bool:
    """Actions safe to schedule eagerly (they commute with everything).

    Analysers never fork, never send, and have one message source, so both
    their runs and deliveries to them cannot race.  A delivery to a system
    process that the scenario shape limits to a single sender cannot race
    either: sys mailboxes are never flushed and no second sender pair
    exists.
    """
    if tok[0] == "run":
        return tok[1].kind is PidKind.ANALYZER
    if tok[0] == "dlv":
        dst = tok[2]
        if dst.kind is PidKind.ANALYZER:
            return True
        return dst.kind is PidKind.SYSTEM and rt.procs[dst].single_sourced
    return False


@dataclass
class _Frame:
    options: list[Token]
    sleep: dict[Token, StepFx]
    forced: bool = False
    backtrack: dict[Token, None] = field(default_factory=dict)  # ordered set
    done: dict[Token, StepFx] = field(default_factory=dict)
    chosen: Optional[Token] = None
    chosen_fx: Optional[StepFx] = None

    def next_candidate(self) -> Optional[Token]:
        for tok in self.backtrack:
            if tok not in self.done and tok not in self.sleep and tok != self.chosen:
                return tok
        return None

    def widen(self, tok: Optional[Token]) -> None:
        """Add a backtrack point (everything enabled when ``tok`` is None)."""
        if self.forced:
            return
        if tok is not None:
            self.backtrack[tok] = None
        else:
            for t in self.options:
                self.backtrack[t] = None


def enumerate_schedules(
    factory: Callable[[], Runtime],
    *,
    depth_cap: int = DEFAULT_DEPTH_CAP,
    reduction: str = "dpor",
    guard: int = DEFAULT_GUARD,
    force: bool = False,
) -> Iterator[Schedule]:
    """Yield every distinct maximal schedule of the scenario the factory builds.

    Schedules are complete token sequences replayable via ``Runtime.run``.
    Raises ``ExplosionGuard`` past ``guard`` yielded schedules (unless
    forced) and ``DepthCapExceeded`` if a run outgrows ``depth_cap``.
    """
    if reduction not in REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}")
    reduced = reduction != "none"
    dpor = reduction == "dpor"

    rt = factory()
    rt.record_effects = True
    commute_forks = rt.stable_pids
    frames: list[_Frame] = []
    path: list[Token] = []
    pending_sleep: dict[Token, StepFx] = {}
    yielded = 0

    def child_sleep(frame: _Frame, fx: StepFx) -> dict[Token, StepFx]:
        merged = dict(frame.sleep)
        merged.update(frame.done)
        if not merged:
            return merged
        return {t: f for t, f in merged.items() if not dependent(f, fx, commute_forks)}

    def note_races(fx: StepFx) -> None:
        # the state *before* the last step dependent with this one could
        # also have run this action (or needs full expansion if the action
        # was not yet enabled there): classic dynamic partial-order rule
        for j in range(len(frames) - 2, -1, -1):
            prior = frames[j]
            if dependent(prior.chosen_fx, fx, commute_forks):
                tok = frames[-1].chosen
                prior.widen(tok if tok in prior.options else None)
                return

    def open_frame() -> Optional[Token]:
        """Create the frame for the current state; pick its first action."""
        nonlocal pending_sleep
        opts = rt.enabled_tokens()
        if not opts:
            return None
        forced = False
        if reduced:
            eager = next((t for t in opts if _inert(t, rt) and t not in pending_sleep), None)
            if eager is not None:
                opts = [eager]
                forced = True
        frame = _Frame(options=opts, sleep=pending_sleep, forced=forced)
        tok = next((t for t in opts if t not in frame.sleep), None)
        if tok is None:
            return None  # everything enabled is asleep: covered elsewhere
        if dpor:
            frame.backtrack[tok] = None
        else:
            frame.widen(None)
        frames.append(frame)
        return tok

    def execute(tok: Token) -> None:
        nonlocal pending_sleep
        frame = frames[-1]
        rt.step(tok)
        path.append(tok)
        frame.chosen, frame.chosen_fx = tok, rt.last_fx
        if dpor and not frame.forced:
            note_races(rt.last_fx)
        pending_sleep = child_sleep(frame, rt.last_fx) if reduced else {}

    while True:
        # descend until this branch bottoms out
        while True:
            if len(path) >= depth_cap:
                raise DepthCapExceeded(f"run exceeded {depth_cap} scheduler steps")
            tok = open_frame()
            if tok is None:
                if not rt.enabled_tokens():
                    yield Schedule(steps=[render_token(t) for t in path])
                    yielded += 1
                    if yielded > guard and not force:
                        raise ExplosionGuard(
                            f"more than {guard} schedules; pass force to continue"
                        )
                break
            execute(tok)

        # backtrack to the deepest frame with an unexplored alternative
        while frames:
            frame = frames[-1]
            if frame.chosen is not None:
                frame.done[frame.chosen] = frame.chosen_fx
                frame.chosen = None
            tok = frame.next_candidate()
            if tok is None:
                frames.pop()
                continue
            depth = len(frames) - 1
            del path[depth:]
            rt = factory()
            rt.record_effects = True
            for i in range(depth):
                rt.step(frames[i].chosen)
            execute(tok)
            break
        else:
            return
