"""fieldshift: cross-year cropland segmentation testbed.

Simulate shifted multi-year scenes, train a compact U-Net with the chosen
normalization/augmentation/loss/dropout recipe, run MC-dropout ensembles
with uncertainty layers, and evaluate everything into report tables.
"""

__version__ = "0.1.0"

from .raster import BACKGROUND, BOUNDARY, IGNORE, INTERIOR, Chip, LabelMask  # noqa: F401
