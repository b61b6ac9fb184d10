"""Recognition-side math for long-range whole-body biometrics.

Open-set losses, quality-guided score fusion, evaluation protocols,
multi-subject tracking and a Zernike turbulence simulator, all working on
precomputed embeddings and detection records.
"""
from .core import Modality, RangeClass, Template
from .errors import InputError, WholebodyError

__version__ = "0.1.0"

__all__ = ["Modality", "RangeClass", "Template", "InputError", "WholebodyError", "__version__"]
