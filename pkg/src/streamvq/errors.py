"""Exception types shared across the package."""


class StreamVQError(Exception):
    """Base class for all streamvq errors."""


class DimensionMismatchError(StreamVQError, ValueError):
    """A vector's length does not match the configured dimensionality."""


class EmptyClusterError(StreamVQError):
    """A cluster slot was read before it received any update."""

    def __init__(self, cluster_id: int):
        super().__init__(f"cluster {cluster_id} has no appearance mass yet")
        self.cluster_id = cluster_id


class EmptyCodebookError(StreamVQError):
    """No initialized cluster is available for the requested operation."""


class UnknownUserError(StreamVQError, KeyError):
    """A query named a user id with no stored vector and no raw vector."""


class SnapshotFormatError(StreamVQError):
    """Base class for snapshot (de)serialization failures."""


class SnapshotHeaderError(SnapshotFormatError):
    """Snapshot bytes do not start with a well-formed header."""


class SnapshotVersionError(SnapshotFormatError):
    """Snapshot format revision is not supported by this build."""


class SnapshotTruncatedError(SnapshotFormatError):
    """Snapshot payload is shorter than the header promises."""
