"""Two-stage dermoscopy analysis: lesion segmentation, then three-class recognition."""

__version__ = "0.1.0"
