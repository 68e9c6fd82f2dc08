"""Shared error hierarchy.

Every domain error raised by this package derives from ``FedweaveError``
and carries a ``module`` tag naming the subsystem it came from, so the CLI
can render ``module: message`` lines uniformly.
"""

from __future__ import annotations


class FedweaveError(Exception):
    """Base class for all domain errors raised by fedweave."""

    module = "fedweave"
