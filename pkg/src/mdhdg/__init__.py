"""HDG and mixed methods built on M-decompositions, for diffusion and Navier-Stokes."""

__version__ = "0.1.0"
