"""Exception types raised across the pipeline."""


class InductiveCodingError(Exception):
    """Base class for every error this package raises on purpose."""


class CorpusError(InductiveCodingError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        head = "; ".join(self.errors[:5])
        more = f" (+{len(self.errors) - 5} more)" if len(self.errors) > 5 else ""
        super().__init__(f"{len(self.errors)} corpus error(s): {head}{more}")


class EmptySegmentationError(InductiveCodingError):
    def __init__(self, doc_id: str):
        self.doc_id = doc_id
        super().__init__(f"document {doc_id!r} produced no segments")


class GatewayError(InductiveCodingError):
    pass


class TransientError(GatewayError):
    """Raised by providers for failures worth retrying (429, 5xx, timeouts)."""


class TransportError(GatewayError):
    def __init__(self, message: str, attempts: int):
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempt(s))")


class ConfigurationError(GatewayError):
    """Non-retryable: bad credentials, unknown model, malformed request."""


class IntegrityError(InductiveCodingError):
    """Vector shape or normalization contract violated."""


class ParseError(InductiveCodingError):
    pass


class LabelParseError(ParseError):
    pass


class ClusterParseError(ParseError):
    pass


class MergeParseError(ParseError):
    pass


class LookupFailure(InductiveCodingError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "lookup failed"


class GoldSchemaError(InductiveCodingError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__(f"{len(self.errors)} gold schema error(s): " + "; ".join(self.errors[:5]))
