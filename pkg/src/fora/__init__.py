"""Fisher-selected, Stiefel-constrained low-rank adapters on a toy transformer."""

__version__ = "0.1.0"
