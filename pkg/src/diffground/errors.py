"""Shared exception base for this package.

Named error classes live next to the operations that raise them; every one
subclasses GroundingError so callers (notably the CLI) can distinguish
library failures from programming errors.
"""


class GroundingError(Exception):
    pass
