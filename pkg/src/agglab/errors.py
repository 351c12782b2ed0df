"""Exception types shared across the protocol and harness layers.

Every failure mode that a caller is expected to catch has its own class so
tests can assert on the exact kind rather than matching message strings.
"""


class AgglabError(Exception):
    """Base class for all library-specific errors."""


class ConfigError(AgglabError):
    """A configuration value is missing, malformed, or inconsistent.

    ``field`` names the offending entry so CLI errors can point at it.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ZeroInverseError(AgglabError):
    """Multiplicative inverse of zero was requested."""


class ClipOverflowError(AgglabError):
    """A real value fell outside the quantizer's clip range."""


class ShapeMismatchError(AgglabError):
    """Vector lengths or moduli disagree where they must match."""


class InsufficientSharesError(AgglabError):
    """Fewer shares or coded messages arrived than reconstruction needs."""


class DuplicateShareError(AgglabError):
    """The same origin delivered a share twice within one round."""


class MissingShareError(AgglabError):
    """A share required by the current step was never received."""


class ShareConflictError(AgglabError):
    """Both seed shares and key shares were collected for one user.

    Collecting both would let the server unmask that user's model, so the
    collection step refuses the second kind.
    """


class RecoveryFailedError(AgglabError):
    """The recovery phase could not produce an aggregate.

    The simulation harness reports this outcome instead of crashing the
    whole sweep; protocol-level callers may catch it directly.
    """


class TranscriptError(AgglabError):
    """A round transcript is truncated, corrupt, or inconsistent."""


class SchemaError(AgglabError):
    """A cost CSV is missing required columns or holds unusable values."""
