"""Chemotherapy timeline extraction from clinical notes."""

from .triplets import BEGINS_ON, CONTAINS_1, ENDS_ON, RELATIONS, SactTriplet, canonicalize

__all__ = ["BEGINS_ON", "CONTAINS_1", "ENDS_ON", "RELATIONS", "SactTriplet", "canonicalize"]
__version__ = "0.1.0"
