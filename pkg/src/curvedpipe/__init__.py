"""Finite-element solver for steady fully developed second-grade flows in curved pipes."""

from curvedpipe.geometry import FlowParams, build_mesh

__all__ = ["FlowParams", "build_mesh"]
__version__ = "0.1.0"
