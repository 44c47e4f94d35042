"""Adaptive Petrov-Galerkin LOD solver for sequences of similar coefficients.

The package solves -div(A grad u) = f on box domains for whole sequences of
rapidly varying coefficients. Localized element correctors are computed once,
then reused across the sequence; computable error indicators decide, per
coarse element, when a corrector must be recomputed. A two-phase Darcy flow
driver couples the pressure solver to an explicit upwind saturation update
through conservative coarse face fluxes.

Modules: grid (meshes, patches, faces), fem (Q1 assembly and fine reference
solves), interp (the quasi-interpolation operator), corrector (localized
element correctors), indicator (recompute indicators), pglod (global coarse
system), adaptive (the lagging element store and step loop), darcy (two-phase
flow), field (coefficient generators), cli (experiment presets), runio
(artifact writers).
"""

from .errors import ConfigError, LodError, NumericError

__version__ = "0.1.0"

__all__ = ["ConfigError", "LodError", "NumericError", "__version__"]
