"""Road-to-vehicle cooperative BEV perception simulator."""

__version__ = "0.1.0"
