"""Simulator, compiler and metrics for an in-memory DNN training accelerator built on a 3D memory stack."""

__version__ = "0.1.0"
