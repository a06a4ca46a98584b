"""Valence/arousal/dominance regression for 48x48 grayscale faces on a small numpy autodiff engine."""

__version__ = "0.1.0"
