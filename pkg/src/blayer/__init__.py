"""Boundary-layer expansion laboratory for steady 2-D Navier-Stokes over a moving plate."""
import logging

__version__ = "0.1.0"

logging.getLogger(__name__).addHandler(logging.NullHandler())
