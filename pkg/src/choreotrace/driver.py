"""Assemble a runtime for a scenario and drive complete runs.

Four run modes share one scenario description:

* ``none``    bare system, no monitoring
* ``inline``  synchronous in-step analysis (the oracle baseline)
* ``ea``      outline monitoring, dedicated analyser processes
* ``ia``      outline monitoring, analysis inside tracers
"""

from __future__ import annotations

from typing import Callable, Optional

from . import choreography
from .analysis import InlineWeaver
from .model import PidKind
from .runtime import Runtime, RunResult, Schedule
from .scenario import Scenario, script_body
from .tracing import TraceTable

MODES = ("none", "inline", "ea", "ia")


def build_runtime(scenario: Scenario, mode: str = "ia", **opts) -> Runtime:
    """Create a runtime with the scenario's initial processes installed."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    rt = Runtime(**opts)
    body = script_body(scenario.top)
    if mode == "none":
        rt.spawn(body, PidKind.SYSTEM, sig=scenario.top.sig)
    elif mode == "inline":
        weaver = InlineWeaver(rt, scenario.monitor_map)
        rt.hook = weaver
        pid = rt.spawn(body, PidKind.SYSTEM, sig=scenario.top.sig)
        weaver.register_top(pid)
    else:
        rt.hook = TraceTable(rt, scenario.mutations)
        choreography.start(
            rt,
            body,
            scenario.top.sig,
            scenario.monitor_map,
            variant=mode,
            mutations=scenario.mutations,
        )
    return rt


def runtime_factory(scenario: Scenario, mode: str = "ia", **opts) -> Callable[[], Runtime]:
    """Factory producing fresh, identically configured runtimes (for replay)."""

    def make() -> Runtime:
        return build_runtime(scenario, mode, **opts)

    return make


def flat_runtime_factory(specs, **opts) -> Callable[[], Runtime]:
    """Factory for a bare unmonitored runtime with several top-level processes."""

    def make() -> Runtime:
        rt = Runtime(**opts)
        for spec in specs:
            rt.spawn(script_body(spec), PidKind.SYSTEM, sig=spec.sig)
        return rt

    return make


def simulate(
    scenario: Scenario,
    schedule: Optional[Schedule] = None,
    mode: str = "ia",
    **opts,
) -> RunResult:
    """Run one scenario to quiescence under one schedule."""
    if schedule is None:
        schedule = Schedule(seed=0)
    if scenario.mutations and "capture_errors" not in opts:
        opts["capture_errors"] = True
    rt = build_runtime(scenario, mode, **opts)
    return rt.run(schedule)


def inline_run(scenario: Scenario, seed: int = 0, **opts) -> dict[str, str]:
    """Final verdict map of the synchronous-analysis baseline.

    With per-process (parametric) monitors the result does not depend on
    the schedule, so a single seed suffices as the oracle.
    """
    return simulate(scenario, Schedule(seed=seed), mode="inline", **opts).verdicts
