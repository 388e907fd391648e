"""Private recommender training and evaluation: LDP and DPSGD regimes, beyond-accuracy metrics."""

__version__ = "0.1.0"
