"""Graph-RL connection management for O-RAN with adversarial attacks and defenses."""

__version__ = "0.1.0"
