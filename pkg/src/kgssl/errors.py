"""Exception types shared across modules; the CLI maps them to exit codes."""


class ConfigError(ValueError):
    """Invalid configuration or arguments (exit code 2)."""


class DataError(ValueError):
    """Malformed, missing or inconsistent input data (exit code 3)."""


class SchemaError(DataError):
    """Input files lack required columns."""


class NumericError(ArithmeticError):
    """Training or evaluation produced non-finite values (exit code 4)."""
