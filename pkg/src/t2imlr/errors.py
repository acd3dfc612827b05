"""Exception types shared across the package."""


class DegenerateInputError(ValueError):
    """Input is numerically unusable, e.g. a vector with near-zero norm."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class CorpusParseError(ValueError):
    """A corpus file line could not be parsed. Carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class FormatError(ValueError):
    """A binary file violates its format. Carries the byte offset of the fault."""

    def __init__(self, offset: int, message: str):
        super().__init__(f"offset {offset}: {message}")
        self.offset = offset


class ConfigError(ValueError):
    """Configuration values are missing, unknown, or mutually inconsistent."""
