"""Phasor reconstruction of AC magnetic fields from NV-ensemble lock-in ODMR spectra."""

import logging

__version__ = "0.1.0"

LOG = logging.getLogger("nvphasor")
LOG.addHandler(logging.NullHandler())
