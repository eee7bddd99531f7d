"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: configuration problems exit 2, bad
input data exits 3, broken internal invariants exit 4.
"""


class SplatEmbedError(Exception):
    exit_code = 4


class ConfigError(SplatEmbedError):
    """Invalid parameters or a violated call contract."""

    exit_code = 2


class ContractError(ConfigError):
    pass


class DataError(SplatEmbedError):
    """Input data that parses but is not valid."""

    exit_code = 3


class FormatError(DataError):
    """A file that does not follow its binary or text layout."""


class NumericError(SplatEmbedError):
    exit_code = 3


class LabelLookupError(ConfigError, LookupError):
    """A query label missing from the lookup table; treated as a usage error."""


class PipelineError(SplatEmbedError):
    """Raised when one or more encode workers fail.

    ``statuses`` maps worker rank to ``"ok"`` or the error text.
    """

    def __init__(self, message, statuses=None):
        super().__init__(message)
        self.statuses = dict(statuses or {})
