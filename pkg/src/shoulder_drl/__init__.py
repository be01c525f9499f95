"""Deep RL muscle control of a single-axis shoulder abduction surrogate."""

__version__ = "0.1.0"
