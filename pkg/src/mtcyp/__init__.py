"""Multi-task crop yield regression and crop-type segmentation from sparse yield points."""

__version__ = "0.1.0"
