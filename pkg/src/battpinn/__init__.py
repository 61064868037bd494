"""Physics-informed neural networks for battery degradation modelling."""

__version__ = "0.1.0"
