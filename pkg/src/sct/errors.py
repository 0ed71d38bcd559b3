"""Exception taxonomy shared by the library and the CLI.

The CLI maps these onto its exit-code contract: validation/config problems
exit 2, I/O and file-format problems exit 3.
"""


class DimensionError(ValueError):
    """Shapes or sizes of inputs are inconsistent."""


class ParameterError(ValueError):
    """A scalar parameter is outside its admissible range."""


class ValidationError(ValueError):
    """Input data violates a documented invariant."""


class DegeneratePlanError(ValidationError):
    """A transport plan has an all-zero row (a starved part)."""


class ConfigError(ValueError):
    """A run configuration file or grid specification is malformed."""


class FileFormatError(IOError):
    """A binary matrix file or PGM image is malformed; message carries the byte offset."""
