"""Headless soft-tissue surgical simulator with ground-truth annotation output."""
import os

import numba

# The bundled TBB is often too old for numba; the portable layers behave identically here.
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"

__version__ = "0.1.0"
