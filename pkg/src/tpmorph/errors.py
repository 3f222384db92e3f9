"""Exception types shared across the simulator."""


class TpmorphError(Exception):
    """Base class for all simulator errors."""


class OutOfMemory(TpmorphError):
    """Not enough free pages to satisfy an allocation.

    Models a simulated device OOM; callers surface it as a failed
    transformation or a rejected request, never as a crash.
    """


class InvalidRange(TpmorphError):
    """Unmap of a range that is free or owned by a different tag (planner bug)."""


class IncompatibleLayouts(TpmorphError):
    """Two KV layouts do not describe the same axes/geometry."""


class IndivisibleHeads(TpmorphError):
    """Target TP degree does not divide the KV head count."""


class InsufficientStageBuffer(TpmorphError):
    """A migration stage buffer cannot be allocated."""


class MisalignedWithoutPadding(TpmorphError):
    """In-place weight repartitioning requested on an unpadded, misaligned tensor."""


class ShapeMismatch(TpmorphError):
    """Matrix operands with inconsistent shapes."""


class IncompatibleGroup(TpmorphError):
    """Instance group does not conserve GPUs across a transformation."""


class Unschedulable(TpmorphError):
    """No instance nor feasible scale-up can serve a request."""


class TraceError(TpmorphError):
    """Malformed workload trace file."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class EmptyTrace(TpmorphError):
    """Trace file contained no requests."""
