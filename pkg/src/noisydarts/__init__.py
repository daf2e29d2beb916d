"""NoisyDARTS: differentiable architecture search with noise-injected candidate ops."""
__version__ = "0.1.0"
