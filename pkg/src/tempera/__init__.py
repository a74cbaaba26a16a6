"""Two-view cardiac RV segmentation: SA/LA registration, shared pyramid features, and affine fusion."""

__version__ = "0.1.0"
