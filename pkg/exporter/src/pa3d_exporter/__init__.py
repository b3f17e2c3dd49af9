"""Exporter bridge: renders point clouds, runs dense 2D / text encoders,
and writes cache + text-table directories in the core PA3D-1 formats.

The core pipeline is consumed strictly through its external interfaces:
the documented file formats and the `pa3d cache-lift` CLI.
"""

__version__ = "0.1.0"
