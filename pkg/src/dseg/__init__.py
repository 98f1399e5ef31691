"""LiDAR-guided unsupervised semantic segmentation of camera images."""

__version__ = "0.1.0"

IGNORE = 65535
GROUND = 65534
