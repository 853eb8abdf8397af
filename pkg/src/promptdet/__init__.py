"""Multi-dataset 3D detection with dataset prompts, on synthetic LiDAR-like data."""

__version__ = "0.1.0"
