"""Exception hierarchy shared by the whole toolkit."""

from __future__ import annotations


class ToolkitError(Exception):
    """Base class for every error raised by this package."""


# --- message construction -------------------------------------------------

class MalformedEvent(ToolkitError):
    """Trace event fields do not match the action's field table."""


class NestedRouting(ToolkitError):
    """Attempt to wrap an already-routed message."""


class UnknownQualifier(ToolkitError):
    """A process consumed a message kind it has no handler for."""


# --- scheduling -----------------------------------------------------------

class ScheduleError(ToolkitError):
    """Base class for scheduler-level failures."""


class ScheduleExhausted(ScheduleError):
    """An explicit schedule ended before the run reached quiescence."""


class StepCapExceeded(ScheduleError):
    """The run exceeded the configured step cap."""


class InvalidScheduleStep(ScheduleError):
    """A replayed schedule step names an action that is not enabled."""


class ExplosionGuard(ScheduleError):
    """Enumeration produced more schedules than the safety guard allows."""


class DepthCapExceeded(ScheduleError):
    """Enumeration hit the depth cap before reaching quiescence."""


# --- tracing infrastructure -----------------------------------------------

class TracingError(ToolkitError):
    """Base class for trace-binding failures."""


class AlreadyTraced(TracingError):
    """TRACE on a process that already has a tracer."""


class NotTraced(TracingError):
    """CLEAR/PREEMPT on a process with no (or a different) tracer."""


# --- choreography protocol violations ---------------------------------------
# These are unreachable in a correct run; the interleaving checker proves
# that on small scenarios.  Mutated runs capture them into the log instead.

class ProtocolViolation(ToolkitError):
    """A tracer observed a state its protocol contract rules out."""


class MisdirectedDtc(ProtocolViolation):
    """A detach command arrived at a tracer with no route for its target."""


class OrphanRoutedEvent(ProtocolViolation):
    """A routed event reached a direct-mode tracer with no onward route."""


class DtcProtocolViolation(ProtocolViolation):
    """A routed detach command that is neither ours nor routable."""


class UnknownProcess(ProtocolViolation):
    """An exit event for a process the tracer does not own."""


class RouteExists(ProtocolViolation):
    """Adding a route that is already present in the routing map."""


class RouteMissing(ProtocolViolation):
    """Removing a route that is not in the routing map."""


class TracedExists(ProtocolViolation):
    """Adding a process already present in the traced-processes map."""


class TracedMissing(ProtocolViolation):
    """Removing a process not present in the traced-processes map."""


# --- monitors ---------------------------------------------------------------

class MonitorSpecError(ToolkitError):
    """A monitor description is not well formed."""


class OverlappingPatterns(MonitorSpecError):
    """Two transitions from one state can match the same event."""


# --- logs -------------------------------------------------------------------

class LogIncomplete(ToolkitError):
    """A log lacks the state snapshots the invariant checker needs."""


class LogParseError(ToolkitError):
    """A serialized log line could not be parsed."""
