"""Exception hierarchy.

Two families matter to callers: :class:`DataError` (bad slides, bad files,
not enough tissue) and :class:`BackendError` (a model backend failed or
answered with something unusable).  The CLI maps them to distinct exit codes.
"""


class PathfinderError(Exception):
    pass


class DataError(PathfinderError, ValueError):
    pass


class SlideFormatError(DataError):
    pass


class InsufficientForegroundError(DataError):
    pass


class TrajectoryFormatError(DataError):
    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class BackendError(PathfinderError):
    pass


class TransportError(BackendError):
    """Raised when a remote backend could not be reached within its retry budget."""


class ProtocolError(BackendError):
    """Malformed or out-of-contract backend response."""


class UnmappableResponseError(BackendError):
    pass


class TrajectoryAborted(BackendError):
    """A backend failed mid-trajectory; ``trajectory`` holds the completed steps."""

    def __init__(self, message, trajectory):
        super().__init__(message)
        self.trajectory = trajectory


class InvalidRequestError(BackendError):
    """The backend rejected the request itself (empty text, wrong feature layout, ...)."""


# Envelope error names understood by the remote clients.
ERROR_TYPES = {
    cls.__name__: cls
    for cls in (BackendError, TransportError, ProtocolError, UnmappableResponseError, InvalidRequestError)
}
