"""Flow-matching refinement of molecular conformers, with toy data, metrics and diagnostics."""

__version__ = "0.1.0"
