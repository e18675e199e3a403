"""Feature-extraction adapter: image folders -> owlkit embedding files."""

from .backbones import REGISTRY, build
from .extract import ROLES, run_extract

__version__ = "0.1.0"

__all__ = ["REGISTRY", "ROLES", "build", "run_extract", "__version__"]
