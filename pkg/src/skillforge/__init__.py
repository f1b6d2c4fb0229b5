"""Self-play pretraining of composable manipulation primitives, and their reuse."""

__version__ = "0.1.0"
