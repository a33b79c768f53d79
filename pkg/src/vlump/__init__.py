"""Vertically lumped multigrid for small aspect ratio Poisson problems."""

__version__ = "0.1.0"
