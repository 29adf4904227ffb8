"""Water height estimation for AWD irrigation pipes from camera images."""

__version__ = "0.1.0"
