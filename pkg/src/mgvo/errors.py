"""Common error base for the grid.

Every module defines its own exception types; they all derive from
MgvoError so service dispatch can map any domain failure onto an ERROR
frame with a stable code (the class name) and message.
"""


class MgvoError(Exception):
    """Base class for all grid errors."""

    @property
    def code(self) -> str:
        return type(self).__name__
