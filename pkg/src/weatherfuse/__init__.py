"""Adverse-weather robust camera/LiDAR 3D detection building blocks.

Modules: ``numerics`` (tensors, parametric maps, gradient checks),
``lidar_geom`` (range images, BEV grids), ``weather_sim`` (synthetic
corruption), ``diffusion_restore`` (conditional DDIM image restoration),
``pcr`` (2D-guided point cloud restoration), ``bafam`` (BEV fusion and
alignment), ``evaluation`` (IoU, AP R40, box decoding) and ``pipeline``
(file formats, synthetic scenes, CLI).
"""

__version__ = "0.1.0"
