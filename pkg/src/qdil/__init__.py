"""Quality-diversity imitation learning: soft-threshold archive, coefficient search,
vectorized policy-gradient branching, and measure-conditioned adversarial rewards."""

__version__ = "0.1.0"
