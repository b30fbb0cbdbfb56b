"""dpn-building: demand response for multi-zone buildings with distributed planning networks."""

from dpn_building.cli import main

__all__ = ["main"]
