"""Exception hierarchy shared across the package.

The CLI maps InputError (and subclasses) to exit code 1 and every other
DsrmError to exit code 2.
"""


class DsrmError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(DsrmError):
    """A documented precondition was violated (shape mismatch, empty input, ...)."""


class ModeError(ContractViolation):
    """A local-count matrix was used in the wrong mode (raw vs fractional)."""


class InputError(DsrmError):
    """Bad user-supplied input: files, manifests, config values, flags."""


class FormatError(InputError):
    """A binary or text artifact does not conform to its documented format."""


class ExtractionError(DsrmError):
    """Feature extraction produced a non-finite activation."""


class DivergenceError(DsrmError):
    """Training produced a non-finite loss or gradient."""


class OracleError(DsrmError):
    """The finite-difference oracle hit a non-finite function evaluation."""
