"""Bayesian dual-resolution Gaussian-process mapping.

Fuses a high-resolution and a standard-resolution volumetric image of the
same quantity into a posterior over a high-resolution mean field, using a
circulant (FFT) embedding of the spatial prior, sparse local kriging to
link the two voxel grids, Hamiltonian Monte Carlo with a circulant mass
matrix, and a decision-theoretic activation rule.
"""

from .kernel import KernelParams, correlation_radius, fwhm, k, params_from_fwhm
from .volume import Grid3, MaskedVolume, NiftiError, read_nifti, write_nifti

__all__ = [
    "KernelParams", "k", "fwhm", "params_from_fwhm", "correlation_radius",
    "Grid3", "MaskedVolume", "NiftiError", "read_nifti", "write_nifti",
]

__version__ = "0.1.0"
