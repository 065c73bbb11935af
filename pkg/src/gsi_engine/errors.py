"""Shared exception base for the engine.

Every module-level error derives from EngineError so callers (CLI, service)
can map operational failures uniformly without catching bare Exception.
"""


class EngineError(Exception):
    """Base class for all engine-raised operational errors."""

    code = "engine_error"

    def __init__(self, message: str = "", **detail):
        super().__init__(message or self.__doc__ or self.__class__.__name__)
        self.detail = detail
