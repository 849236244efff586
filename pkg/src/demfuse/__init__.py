"""Fusion of two DEMs weighted by neural-network-predicted height errors."""

from demfuse.raster import Grid, GridHeader, load_grid, save_grid

__version__ = "0.1.0"

__all__ = ["Grid", "GridHeader", "load_grid", "save_grid", "__version__"]
