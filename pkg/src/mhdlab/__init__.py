"""mhdlab: boundary-controlled 2D incompressible MHD laboratory."""

__version__ = "0.1.0"
