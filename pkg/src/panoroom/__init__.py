"""Room layout recovery from equirectangular edge and corner probability maps."""

__version__ = "0.1.0"
