"""Scenario descriptions: what the system under scrutiny does.

A scenario is a tree of process specs.  Each process runs a small script,
one operation per scheduler step: fork a child, send a payload, receive
one, or crash.  Scripts end with a normal exit (or an abnormal one via
``Crash``), and refer to other processes through variables bound by their
own forks, plus the implicit ``parent``.

The random generator builds fork trees with bidirectional parent/child
messaging where every send precedes every receive within each script, so
generated systems always drain to quiescence.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

from .analysis import (
    MonitorSpec,
    chain_monitor,
    exit_monitor,
    quiet_after_exit_monitor,
    worker_monitor,
)
from .model import Action, Pid, Signature, SysMessage
from .runtime import YIELD, Receive

# ---------------------------------------------------------------------------
# Script operations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Fork:
    var: str
    spec: "ProcSpec"


#: Send payload sentinel: answer the most recently received request.
REPLY = "<reply>"


@dataclass(frozen=True)
class Send:
    to: str  # variable name: "parent" or a fork var
    payload: str = "m"


@dataclass(frozen=True)
class Recv:
    pass


@dataclass(frozen=True)
class Crash:
    pass


Op = Union[Fork, Send, Recv, Crash]


@dataclass(frozen=True)
class ProcSpec:
    sig: Signature
    ops: tuple[Op, ...] = ()


def _is_sys(msg) -> bool:
    return isinstance(msg, SysMessage)


RECEIVE_SYS = Receive(match=_is_sys)


def single_sourced(spec: ProcSpec, forker: Optional[ProcSpec]) -> bool:
    """True when at most one process can ever send to instances of ``spec``.

    Scripts can only address their parent and their own forked children, so
    the potential senders are statically visible: the forking parent (if it
    sends to this child's variable) plus every child of ``spec`` that sends
    to ``parent``.
    """
    senders = 0
    if forker is not None:
        var = next(op.var for op in forker.ops if isinstance(op, Fork) and op.spec is spec)
        if any(isinstance(op, Send) and op.to == var for op in forker.ops):
            senders += 1
    for op in spec.ops:
        if isinstance(op, Fork) and any(
            isinstance(o, Send) and o.to == "parent" for o in op.spec.ops
        ):
            senders += 1
            if senders > 1:
                return False
    return senders <= 1


def script_body(spec: ProcSpec, parent: Optional[Pid] = None):
    """Turn a process spec into a runtime behaviour (one op per step)."""

    def body(ctx):
        env: dict[str, Pid] = {}
        if parent is not None:
            env["parent"] = parent
        for op in spec.ops:
            if isinstance(op, Fork):
                child = ctx.fork_system(
                    script_body(op.spec, ctx.self_pid),
                    op.spec.sig,
                    single_sourced=single_sourced(op.spec, spec),
                )
                env[op.var] = child
                yield YIELD
            elif isinstance(op, Send):
                payload = ctx.reply_payload() if op.payload == REPLY else op.payload
                ctx.send(env[op.to], SysMessage(payload))
                yield YIELD
            elif isinstance(op, Recv):
                yield RECEIVE_SYS
                yield YIELD
            elif isinstance(op, Crash):
                ctx.mark_crashed()
                return
            else:
                raise TypeError(f"unknown op {op!r}")

    return body


@dataclass
class Scenario:
    name: str
    top: ProcSpec
    monitor_map: Mapping[Signature, MonitorSpec] = field(default_factory=dict)
    mutations: frozenset[str] = frozenset()

    def with_mutations(self, *names: str) -> "Scenario":
        return Scenario(self.name, self.top, self.monitor_map, frozenset(names))


# ---------------------------------------------------------------------------
# Fixed scenarios
# ---------------------------------------------------------------------------


def running_example() -> Scenario:
    """Three sequential processes, each with its own monitor.

    The top process forks a child and messages it; the child then forks a
    grandchild and terminates.  Expected analysed orders: frk,snd,ext at
    the root tracer; rcv,frk,ext at the child's tracer; ext at the
    grandchild's.
    """
    grandchild = ProcSpec("task_r")
    child = ProcSpec("task_q", (Recv(), Fork("r", grandchild)))
    top = ProcSpec("task_p", (Fork("q", child), Send("q", "ping")))
    phi = {
        "task_q": chain_monitor("child_order", [Action.RCV, Action.FRK, Action.EXT]),
        "task_r": chain_monitor("grandchild_order", [Action.EXT]),
    }
    return Scenario("running-example", top, phi)


def running_example_gap() -> Scenario:
    """Running example with the grandchild left unmapped.

    The grandchild then shares its parent's tracer, exercising the
    shared-process instrumentation branches in both tracer modes.
    """
    base = running_example()
    phi = {"task_q": base.monitor_map["task_q"]}
    return Scenario("running-example-gap", base.top, phi)


def chain_comm() -> Scenario:
    """Four-deep chain with messaging at two levels.

    Deep enough that routed messages cross two hops and detach commands
    pass through intermediate tracers in both of their modes.
    """
    great = ProcSpec("task_s")
    grandchild = ProcSpec("task_r", (Recv(), Fork("s", great)))
    child = ProcSpec("task_q", (Recv(), Fork("r", grandchild), Send("r", "go")))
    top = ProcSpec("task_p", (Fork("q", child), Send("q", "ping")))
    phi = {
        "task_q": chain_monitor("q_order", [Action.RCV, Action.FRK, Action.SND, Action.EXT]),
        "task_r": chain_monitor("r_order", [Action.RCV, Action.FRK, Action.EXT]),
        "task_s": chain_monitor("s_order", [Action.EXT]),
    }
    return Scenario("chain-comm", top, phi)


FIXED_SCENARIOS = {
    "running-example": running_example,
    "running-example-gap": running_example_gap,
    "chain-comm": chain_comm,
}


def independent_specs(n: int) -> list[ProcSpec]:
    """n unrelated single-step (exit-only) processes, no parent."""
    return [ProcSpec("leaf") for _ in range(n)]


# ---------------------------------------------------------------------------
# Randomized scenarios
# ---------------------------------------------------------------------------

_SIG_POOL = ("alpha", "beta", "gamma", "delta", "epsilon")


def _monitor_for(sig: Signature) -> MonitorSpec:
    flavors = (exit_monitor, quiet_after_exit_monitor)
    return flavors[sum(map(ord, sig)) % len(flavors)](f"{sig}_prop")


def random_scenario(seed: int, max_procs: int = 50) -> Scenario:
    """Random fork tree with per-edge request/reply traffic.

    Every script performs all forks and sends before any receive, and each
    receive has a matching send, so the system always reaches quiescence.
    A few processes crash instead of exiting normally.
    """
    rng = random.Random(seed)
    n = rng.randint(3, max_procs)
    parents = [None] + [rng.randrange(i) for i in range(1, n)]
    sigs = [_SIG_POOL[rng.randrange(len(_SIG_POOL))] for _ in range(n)]
    children: list[list[int]] = [[] for _ in range(n)]
    for i in range(1, n):
        children[parents[i]].append(i)

    down = [rng.randint(0, 2) for _ in range(n)]  # requests parent -> child i
    up = [rng.randint(0, 2) for _ in range(n)]  # replies child i -> parent
    crash = [rng.random() < 0.15 for _ in range(n)]

    def build(i: int) -> ProcSpec:
        # one token stream per child (fork first, then its requests), all
        # up-sends to the parent, randomly interleaved order-preservingly
        streams: list[list[Op]] = []
        for c in children[i]:
            streams.append(
                [Fork(f"c{c}", build(c))] + [Send(f"c{c}", f"d{i}.{c}.{k}") for k in range(down[c])]
            )
        if parents[i] is not None and up[i]:
            streams.append([Send("parent", f"u{i}.{k}") for k in range(up[i])])
        ops: list[Op] = []
        live = [s for s in streams if s]
        while live:
            pick = rng.randrange(len(live))
            ops.append(live[pick].pop(0))
            if not live[pick]:
                del live[pick]
        incoming = (down[i] if parents[i] is not None else 0) + sum(up[c] for c in children[i])
        ops.extend(Recv() for _ in range(incoming))
        if crash[i]:
            ops.append(Crash())
        return ProcSpec(sigs[i], tuple(ops))

    top = build(0)
    mapped = [s for s in _SIG_POOL if rng.random() < 0.6]
    phi = {s: _monitor_for(s) for s in mapped}
    return Scenario(f"random-{seed}", top, phi)
