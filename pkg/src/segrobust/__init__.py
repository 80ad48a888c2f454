"""Label-map perturbation and robustness metrics for semantic segmentation."""

__version__ = "0.1.0"
