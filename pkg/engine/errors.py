"""
Exception hierarchy for the ACL lab
"""


class ACLError(Exception):
    """Base class for every error raised by the engine"""


class ContractViolation(ACLError, ValueError):
    """An operation was called with inputs that break its preconditions"""


class IdxParseError(ACLError):
    """An IDX file could not be decoded"""


class IdxMagicError(IdxParseError):
    """Header magic number is not the expected images/labels value"""


class IdxTruncatedError(IdxParseError):
    """Payload ends before the header-declared item count"""


class IdxCountMismatchError(IdxParseError):
    """Images and labels files declare different item counts"""


class BudgetError(ACLError):
    """Annotation request breaks the pool/budget ledger of a task"""


class ConfigError(ACLError):
    """Experiment configuration is invalid"""

    def __init__(self, message: str, key: str = None):
        super().__init__(message)
        self.key = key


class MetricError(ACLError):
    """A metric is undefined for the given inputs"""


class BaselineMissingError(ACLError):
    """No supervised-CL run matches an ACL run"""


class DownloadError(ACLError):
    """Dataset files could not be fetched"""
