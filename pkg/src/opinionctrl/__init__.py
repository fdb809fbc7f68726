"""Consensus control toolkit for scalar opinion dynamics.

Pipeline: synthesize suboptimal pair feedback from frozen Riccati
equations, distill it into gradient-augmented neural surrogates, and use
either inside a binary-collision Monte Carlo simulation of a large
population of agents.
"""

from opinionctrl.model import ModelConfig

__version__ = "0.1.0"

__all__ = ["ModelConfig", "__version__"]
