"""Certified diameters of small Carnot-Caratheodory balls via calibrations."""

__version__ = "0.1.0"
