"""Point-wise personalized neural radiance fields with probabilistic point features, at desk scale."""

__version__ = "0.1.0"
