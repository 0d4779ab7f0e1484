"""Interface-reformulated solver for incompressible elastodynamics with a free internal boundary."""

__version__ = "0.1.0"
