"""Exception types shared across the package."""

from __future__ import annotations


class RagsumError(Exception):
    """Base class for all errors raised by this package."""


class InvalidConfig(RagsumError):
    pass


class ParseError(RagsumError):
    pass


class ValidationError(RagsumError):
    pass


class MissingField(RagsumError):
    pass


class EmptyOutput(RagsumError):
    pass


class CountMismatch(RagsumError):
    def __init__(self, found: int, expected: int):
        super().__init__(f"expected {expected} item(s), found {found}")
        self.found = found
        self.expected = expected


class ProviderError(RagsumError):
    def __init__(self, message: str, status: int | None = None, body: str = ""):
        super().__init__(message)
        self.status = status
        self.body = body


class ProviderTimeout(ProviderError):
    pass


class DimensionMismatch(RagsumError):
    pass


class DuplicateId(RagsumError):
    pass


class EmptyIndex(RagsumError):
    pass


class IndexFrozen(RagsumError):
    pass


class IndexFormatError(RagsumError):
    pass


class EmptyTokenList(RagsumError):
    pass


class EmptyReference(RagsumError):
    pass


class EmptyTruth(RagsumError):
    pass


class EmptyInput(RagsumError):
    pass


class AllAbstained(RagsumError):
    pass


class MissingArtifact(RagsumError):
    def __init__(self, stage: str):
        super().__init__(f"missing artifacts for stage '{stage}'")
        self.stage = stage


class ConfigMismatch(RagsumError):
    pass
