"""Flow-state estimation from sparse sensors with a POD/Galerkin reduced-order model."""

__version__ = "0.1.0"
