"""mgvo: a desk-scale federated medical data grid.

Autonomous site nodes keep their own image catalog and content store; a
central node owns identity and membership; queries federate by shipping
sub-queries to each site and merging the per-site XML result sets.
"""

from mgvo.errors import MgvoError

__all__ = ["MgvoError"]
__version__ = "0.1.0"
