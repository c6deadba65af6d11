"""Exception hierarchy shared by the runtime and the containers."""


class PGASError(Exception):
    """Base class for every error raised by pgaskit."""


class InitError(PGASError):
    """Backend bring-up failed (bind/connect failure, inconsistent configuration)."""


class UsageError(PGASError):
    """An operation was called with arguments that violate its contract."""


class AllocationError(PGASError):
    """The calling rank's shared segment has no room for the request."""


class ConnectionLost(PGASError):
    """A peer rank disappeared while the world was still running."""


class DeadlockError(PGASError):
    """A spin loop exceeded the watchdog timeout."""


class CapacityError(PGASError):
    """A collective resize or migrate cannot fit the live contents."""


class NotSetError(PGASError):
    """A container cell was read before anything was stored in it."""


class WorldError(PGASError):
    """One or more ranks of a spawned world failed.

    ``failures`` maps rank -> formatted traceback.
    """

    def __init__(self, failures):
        self.failures = dict(failures)
        lines = [f"{len(self.failures)} rank(s) failed"]
        for rank in sorted(self.failures):
            lines.append(f"--- rank {rank} ---\n{self.failures[rank]}")
        super().__init__("\n".join(lines))
