"""Interpretable stochastic object models learned from noisy measurements.

Phantoms from a clustered lumpy background model are translated into realistic
objects by a cycle-consistent GAN whose realistic-domain losses see the
generator output only through the measurement operator.
"""
from .clb import ClbParams, ClbRealization, Normalization, ObjectImage, add_cluster, move_cluster, rasterize, sample_clb
from .measurement import MeasurementConfig, MeasurementImage, MeasurementOperator, apply_measurement

__version__ = "0.1.0"
