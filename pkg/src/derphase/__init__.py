"""Connection-phase selection for new PV units on unbalanced LV feeders."""

__version__ = "0.1.0"
