"""Multi-objective goal-conditioned supervised learning for sequential recommendation."""

__version__ = "0.1.0"
