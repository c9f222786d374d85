"""Exception types shared across the toolkit."""


class TwirlError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(TwirlError, ValueError):
    pass


class DomainError(TwirlError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ParseError(TwirlError):
    """Assistant output could not be parsed.

    ``kind`` is ``"structure"`` for nested/unbalanced/duplicated tags and
    ``"tool_payload"`` for a tool-call body that is not a valid payload.
    """

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


class SessionError(TwirlError):
    """Sandbox session misuse or failure (kind: spawn, duplicate, closed)."""

    def __init__(self, kind: str, message: str = ""):
        super().__init__(f"{kind}: {message}" if message else kind)
        self.kind = kind


class BackendError(TwirlError):
    """Remote call failed (kind: io after exhausted retries, remote for bad responses)."""

    def __init__(self, kind: str, message: str = ""):
        super().__init__(f"{kind}: {message}" if message else kind)
        self.kind = kind


class RoutingError(TwirlError, KeyError):
    """A sample's task type has no entry in the reward table."""

    def __str__(self):
        return Exception.__str__(self)


class AnnotationError(TwirlError, ValueError):
    pass


class MissingScoreError(TwirlError):
    """A judge could not produce a score after re-asking."""
