"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, numerical failures with 3, and I/O errors (plain OSError) with 4.
"""


class ConfigError(ValueError):
    """Invalid configuration, schema violation, or unsupported setup."""


class NumericalError(RuntimeError):
    """Numerical failure: blow-up, divergent training, barrier inversion,
    probability mass escaping a grid, or a degenerate data set."""


class TrainingError(NumericalError):
    """Training diverged; the message names the offending stage."""
