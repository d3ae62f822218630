class StoreError(Exception):
    """Base class for storage engine errors."""


class NotFoundError(StoreError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class IntegrityError(StoreError):
    """Metadata or references are inconsistent with the stored data."""


class CorruptLogError(IntegrityError):
    def __init__(self, path, index, reason="bad checksum"):
        super().__init__(f"{path}: entry {index}: {reason}")
        self.path = path
        self.index = index


class RejectedError(StoreError, ValueError):
    """The operation's preconditions do not hold."""
