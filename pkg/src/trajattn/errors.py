"""Exception types shared across the package.

Every error the library raises deliberately derives from TrajattnError so
the CLI can map failures to stable categories.
"""


class TrajattnError(Exception):
    """Base class for all errors raised by this package."""

    category = "internal"


class DimensionError(TrajattnError):
    """Tensor or array extents do not satisfy an operation's contract."""

    category = "dimension"


class ParameterError(TrajattnError):
    """A scalar argument or configuration value is out of range."""

    category = "parameter"


class ContractError(TrajattnError):
    """A caller violated an API precondition (wrong usage, not bad data)."""

    category = "contract"


class DegenerateRowError(TrajattnError):
    """A softmax slice had every entry masked out."""

    category = "degenerate"


class DegenerateSceneError(TrajattnError):
    """A scene has no unmasked vehicles or no unmasked lanes."""

    category = "degenerate"


class SchemaError(TrajattnError):
    """An input file is missing a required column or field."""

    category = "schema"


class ParseError(TrajattnError):
    """An input file has a malformed cell or inconsistent contents."""

    category = "parse"


class ConfigError(TrajattnError):
    """A run configuration key, value, or combination is invalid."""

    category = "config"


class CheckpointError(TrajattnError):
    """A checkpoint file is corrupt or has an unsupported version."""

    category = "checkpoint"


class ArchiveError(TrajattnError):
    """A scene archive file is corrupt or has an unsupported version."""

    category = "archive"


class NotFoundError(TrajattnError):
    """A requested record (e.g. scene id) does not exist."""

    category = "not-found"


class DivergenceError(TrajattnError):
    """Training produced a non-finite loss."""

    category = "divergence"
