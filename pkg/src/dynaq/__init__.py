"""dynaq: dynamics-aware value learning on deterministic 2D ball puzzles."""

__version__ = "0.1.0"
