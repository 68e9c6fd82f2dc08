"""fedweave — declarative service modelling over a simulated federated cloud.

The package is organised around a small number of cooperating parts:

``bundle``
    The declarative bundle language: applications, machines, placements,
    constraints and relations, with parsing, validation and rendering.
``charms``
    Charm specifications and the charm store: event kinds, guarded hook
    handlers and the closed, idempotent hook-action language.
``provider``
    A simulated bare-metal substrate: machine enlistment, best-fit
    acquisition, containers and capacity reservations.
``engine``
    The reactive model: units, relations, the FIFO event queue and
    convergence, plus checkpoint/restore.
``plan``
    Compilation of bundles into imperative plans, plan execution and
    DOT export of deployment topologies.
``federation``
    Multi-region service catalog with validation-gated region lifecycle,
    master/replica sync and federated identity mapping.
``quota``
    Hierarchical projects with nested quota enforcement and role
    inheritance.
``cli``
    The ``fedweave`` command-line front end over a workspace directory.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import FedweaveError

__all__ = ["FedweaveError", "__version__"]
