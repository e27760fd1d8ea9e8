"""Model assembly: align, merge and probe heterogeneous MLP checkpoints."""

__version__ = "0.1.0"
