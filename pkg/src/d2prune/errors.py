"""Exception hierarchy for the pruning toolkit.

Every failure mode named by an operation contract maps onto one of these
classes so callers (and the CLI) can tell input mistakes, configuration
mistakes, numerical breakdowns and file-format damage apart.
"""


class D2PruneError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(D2PruneError):
    """Operands have incompatible or invalid dimensions."""


class InputError(D2PruneError):
    """Caller-supplied data violates a precondition (bad token id, short corpus, ...)."""


class ConfigError(D2PruneError):
    """Pipeline configuration is inconsistent (missing stats, bad mode, ...)."""


class NumericalError(D2PruneError):
    """A numerical contract was violated (nonpositive pivot, degenerate system)."""


class SingularHessianError(NumericalError):
    """Hessian is not positive-definite even after damping."""


class FormatError(D2PruneError):
    """Base class for tensor-container file damage."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionError(FormatError):
    """File declares an unsupported format version."""


class TruncatedTensorError(FormatError):
    """File ends in the middle of a tensor record."""


class MetadataError(FormatError):
    """Metadata block is malformed or inconsistent with the tensor payload."""
