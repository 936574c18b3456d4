"""Explainable dermatological diagnosis toolkit.

Multi-annotator label ingestion and fuzzy fusion, inter-rater agreement,
joint diagnosis + characteristic networks with optional Grad-CAM guided
attention, and quantitative evaluation of the resulting explanations.
"""

__version__ = "0.1.0"

from .constants import CHARACTERISTICS, DISEASES, OTHER, RETAINED_CHARACTERISTICS, SOURCES

__all__ = [
    "__version__",
    "CHARACTERISTICS",
    "DISEASES",
    "OTHER",
    "RETAINED_CHARACTERISTICS",
    "SOURCES",
]
