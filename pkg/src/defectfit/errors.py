"""Common exception base class.

Concrete error types live next to the code that raises them; they all
derive from :class:`DefectFitError` so callers (notably the CLI) can
catch the whole family at once.
"""


class DefectFitError(Exception):
    pass
