"""Self-supervised body-image acquisition from sensorimotor prediction errors."""

__version__ = "0.1.0"
