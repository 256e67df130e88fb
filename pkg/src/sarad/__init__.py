"""Self-supervised anomaly detection for speckled SAR images."""
from .core import ComplexSlcImage, Domain, Patch, SarImage

__version__ = "0.1.0"
__all__ = ["ComplexSlcImage", "Domain", "Patch", "SarImage"]
