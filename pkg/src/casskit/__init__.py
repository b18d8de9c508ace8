"""Desk-scale coded-aperture snapshot spectral imaging toolkit.

Simulates the dispersive coded-aperture camera, trains a residual
reconstruction network whose robustness to miscalibrated coding masks
comes from a learned per-pixel mask-variance model, and evaluates
reconstructions with the usual image-quality and spectral-fidelity
metrics.  Everything runs on numpy float64 with an in-package
reverse-mode tape, sized for desks rather than clusters.
"""

from . import backbone, gstnet, harness, io, maskmodel, metrics, ndgrad, optics, trainer

__all__ = [
    "backbone",
    "gstnet",
    "harness",
    "io",
    "maskmodel",
    "metrics",
    "ndgrad",
    "optics",
    "trainer",
]

__version__ = "0.1.0"
