"""lesionlab: seven-class skin lesion classification with balancing, attention, and XAI."""

__version__ = "0.1.0"

from .classes import CLASS_CODES, NUM_CLASSES, LesionClass

__all__ = ["CLASS_CODES", "NUM_CLASSES", "LesionClass", "__version__"]
