"""Dual Gaussian preference-distribution recommender.

Learns, per user, a general preference distribution over item-embedding space
and a specific preference distribution over attribute space (the linear image
of the general one), scores items by log-density, trains with a pairwise
ranking objective, and explains recommendations through preferred-attribute
profiles.
"""

__version__ = "0.1.0"

from .backends import BACKEND_NAME as active_backend  # noqa: F401
