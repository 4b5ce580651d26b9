"""Self-supervised dense descriptor learning with a cycle-correspondence loss."""

__version__ = "0.1.0"
