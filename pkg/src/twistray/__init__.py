"""Broken twisted-geodesic (lambda-geodesic) ray transforms on surfaces with a reflector."""

from .expr import ScalarField, parse_scalar_field

__version__ = "0.1.0"

__all__ = ["ScalarField", "parse_scalar_field", "__version__"]
