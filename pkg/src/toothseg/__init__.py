"""Tooth landmark localization and periapical lesion segmentation for 3D volumes.

Modules: ``core`` (types and IO), ``heatmap``, ``scn``, ``unet``, ``losses``,
``pipeline``, ``geometry``, ``metrics``, ``phantom``, ``trainer``, ``cli``.
"""

__version__ = "0.1.0"
