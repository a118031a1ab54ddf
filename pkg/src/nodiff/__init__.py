"""One-step diffusion motion planning with an observation-conditioned initial distribution."""

__version__ = "0.1.0"
