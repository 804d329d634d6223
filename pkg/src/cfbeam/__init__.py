"""Cell-free massive MIMO beamforming laboratory."""

__version__ = "0.1.0"
