"""trajrl: actor-critic learning coupled with batched iLQR trajectory
optimization and uncertainty-biased restart sampling."""

__version__ = "0.1.0"
