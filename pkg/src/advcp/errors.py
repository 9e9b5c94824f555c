"""Exception types shared across the package.

ConfigError covers anything the caller got wrong (bad flag values, bad
shapes, malformed input files).  NumericError covers runtime numeric
failure such as NaN/Inf appearing in a loss.  The CLI maps the former to
exit code 2 and the latter to exit code 3.
"""


class ConfigError(ValueError):
    """Invalid configuration, argument, shape, or input file."""


class NumericError(ArithmeticError):
    """Non-finite values or other numeric failure during computation."""
