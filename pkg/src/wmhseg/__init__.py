"""Two-stage white-matter-hyperintensity segmentation at desk scale:
a from-scratch residual U-Net with a globally class-balanced loss, the
five-metric challenge evaluation and ranking suite, and a synthetic
phantom that makes everything trainable and verifiable without the
original challenge data."""

__version__ = "0.1.0"

from .volume_io import BinaryMask3D, Volume3D  # noqa: F401
