"""Error taxonomy shared by the CLI exit-code convention."""


class ConfigError(Exception):
    """Invalid configuration, flags, or file schema (exit code 1)."""


class NumericalError(Exception):
    """Numerical failure such as a non-finite loss (exit code 3)."""
