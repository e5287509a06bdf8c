"""Multi-scale graph neural network ocean forecaster at desk scale."""

__version__ = "0.1.0"
