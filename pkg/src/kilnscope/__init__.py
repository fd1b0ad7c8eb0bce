"""kilnscope: brick-kiln detection from rasters and POI graphs.

Two pipelines share one evaluation harness: a deterministic spectral-temporal
raster detector (:mod:`kilnscope.rsdetect`) and an anisotropic graph attention
network over point-of-interest graphs (:mod:`kilnscope.model`).
"""
__version__ = "0.1.0"
