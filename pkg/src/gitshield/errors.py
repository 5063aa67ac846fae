"""Exception hierarchy shared by every layer of the shield."""


class ShieldError(Exception):
    """Base class for all errors raised by gitshield."""


class IntegrityError(ShieldError):
    """Stored bytes do not match what the trusted state says they should be."""


class RollbackError(IntegrityError):
    """Persisted state is older than (or diverges from) the trusted root hash."""


class NotFoundError(ShieldError, FileNotFoundError):
    pass


class UntrackedFileError(ShieldError):
    """A host file exists inside a versioned region but is not in the stage."""


class DestinationExistsError(ShieldError, FileExistsError):
    pass


class PathConflictError(ShieldError, NotADirectoryError):
    """A path would be both a file and a directory in the tree."""


class ConcurrentModificationError(ShieldError):
    """Compare-and-set on a ref failed."""


class HandleError(ShieldError, ValueError):
    """Operation on a closed, stale or wrongly-opened file handle."""


class ConfigError(ShieldError):
    pass


class ServiceError(ShieldError):
    """The freshness service was unreachable or answered with an error."""

    def __init__(self, reason, detail=""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


class PushRejected(ServiceError):
    pass


class ShieldAborted(ShieldError):
    """The shield failed-stop earlier; no further operation is permitted."""

    def __init__(self, cause):
        self.cause = cause
        super().__init__(f"shield aborted: {cause}")


class InvalidPathError(ShieldError, ValueError):
    """Path is not canonical or names something the shield refuses to manage."""


class AlreadyTrackedError(ShieldError, FileExistsError):
    pass
