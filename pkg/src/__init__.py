"""
Sequence Feature Alignment (SFA) for domain adaptive detection transformers,
at desk scale: a numpy autodiff engine, a toy detection transformer, the
adversarial sequence alignment losses and a synthetic fog benchmark.
"""

__version__ = "0.3.0"
