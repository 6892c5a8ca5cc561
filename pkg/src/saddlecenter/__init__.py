"""Normal forms, local charts and return maps near a saddle-centre bifurcation."""

__version__ = "0.1.0"
