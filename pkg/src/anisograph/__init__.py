"""Foliations, barriers and a reduced Dirichlet solver for anisotropic graph equations."""
from .errors import AnisographError
from .integrand import Area, Bump, EvenSeries, IntegrandStack, PhiProfile, build_phi

__all__ = ["AnisographError", "Area", "Bump", "EvenSeries", "IntegrandStack", "PhiProfile",
           "build_phi"]
__version__ = "0.1.0"
