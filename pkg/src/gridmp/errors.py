class GridMPError(Exception):
    """Base class for all runtime errors."""


class UsageError(GridMPError, ValueError):
    pass


class TransportError(GridMPError):
    def __init__(self, message: str, peer: int | None = None):
        super().__init__(message if peer is None else f"{message} (peer rank {peer})")
        self.peer = peer


class ProtocolError(TransportError):
    pass


class TruncationError(GridMPError):
    pass


class StartupError(GridMPError):
    pass
