"""irsis: quality-gated iterative refinement for language-prompted segmentation."""

from irsis.mask import BinaryMask, BoundingBox, StructuringElement, IrleError

__version__ = "0.1.0"

__all__ = ["BinaryMask", "BoundingBox", "StructuringElement", "IrleError", "__version__"]
