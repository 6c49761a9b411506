"""Spatiotemporal Hawkes processes under missing-at-random thinning:
exact simulation, EM and WGAN-GP estimation, goodness of fit and hotspot
evaluation."""

__version__ = "0.1.0"
