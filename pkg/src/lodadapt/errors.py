"""Exception types shared across the package.

ConfigError maps to CLI exit code 2 (invalid configuration), NumericError to
exit code 3 (a solver or factorization failed on valid input).
"""


class LodError(Exception):
    pass


class ConfigError(LodError):
    pass


class NumericError(LodError):
    pass
