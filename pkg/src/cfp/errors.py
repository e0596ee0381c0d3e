"""Exception hierarchy shared across the package.

Validation-type errors (bad config values, malformed inputs, broken
bundles) map to CLI exit code 2; anything else that escapes maps to 3.
"""


class CfpError(Exception):
    """Base class for all package errors."""


class InvalidInputError(CfpError):
    """An in-memory argument violates an operation's preconditions."""


class ConfigError(CfpError):
    """A user-supplied configuration value is out of its legal range."""


class BundleError(CfpError):
    """A model/clip bundle on disk is malformed or inconsistent."""
