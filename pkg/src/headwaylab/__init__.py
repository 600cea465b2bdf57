"""headwaylab: patch-based stochastic transit models from AVL traces,
simulated and statistically model-checked for headway regularity."""

__version__ = "0.1.0"
