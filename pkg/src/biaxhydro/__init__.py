"""Two-tensor hydrodynamics for biaxial nematic liquid crystals."""

__version__ = "0.1.0"
