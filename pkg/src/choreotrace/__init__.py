"""Choreographed outline tracing toolkit on a deterministic actor runtime.

Dynamically spawned tracers route trace events hop-by-hop, hand processes
over via detach commands, and collect themselves when idle; an invariant
engine, an exhaustive interleaving checker, and a master-worker benchmark
harness sit on top.
"""

__version__ = "0.1.0"
