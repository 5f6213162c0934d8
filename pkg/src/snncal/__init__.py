"""ANN-to-SNN conversion with forward temporal bias calibration."""
__version__ = "0.1.0"
