"""Decision-focused counterfactual learning on combinatorial action spaces."""

__version__ = "0.1.0"
