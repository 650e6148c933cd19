"""Volumetric homogenization toolkit for yarn-level cloth.

Builds a tetrahedral volume mesh around yarn geometry, fits per-element
material coefficients so the mesh reproduces yarn-level deformation, and
simulates the fitted mesh with a domain-decomposed projective solver.
"""

__version__ = "0.1.0"
