"""Exception hierarchy shared by all stranglerkit modules."""

from __future__ import annotations


class StranglerError(Exception):
    """Base class for every error raised by the toolkit."""


class ParseError(StranglerError):
    """A document is not well-formed JSON or does not match its schema."""


class ValidationError(StranglerError):
    def __init__(self, violations):
        self.violations = list(violations)
        first = self.violations[0] if self.violations else None
        msg = f"{first.rule}: {first.message}" if first else "invalid model"
        if len(self.violations) > 1:
            msg += f" (+{len(self.violations) - 1} more)"
        super().__init__(msg)

    @property
    def rule(self) -> str | None:
        return self.violations[0].rule if self.violations else None


class UnknownContext(StranglerError):
    pass


class AlreadyExtracted(StranglerError):
    pass


class PreconditionFailed(StranglerError):
    pass


class UnknownStep(StranglerError):
    pass


class NotLastApplied(StranglerError):
    pass


class NothingToRollback(StranglerError):
    pass


class AlreadyMirrored(StranglerError):
    pass


class NotConverged(StranglerError):
    pass


class WrongMode(StranglerError):
    pass


class UnknownTable(StranglerError):
    pass


class ReadOnlyReplica(StranglerError):
    """A write reached a replica outside the sync path before cutover."""


class NoRouteMatched(StranglerError):
    pass


class UnknownRoute(StranglerError):
    pass


class InvalidPercent(StranglerError):
    pass


class DuplicateInstance(StranglerError):
    pass


class UnknownInstance(StranglerError):
    pass


class UnknownService(StranglerError):
    pass


class NoHealthyInstance(StranglerError):
    pass


class UpstreamFailure(StranglerError):
    pass


class UnboundEndpoint(StranglerError):
    pass


class IsolationBreach(AssertionError, StranglerError):
    """A simulated request touched another service's database directly."""


class NoDataPath(StranglerError):
    pass


class TraceMismatch(StranglerError):
    pass
