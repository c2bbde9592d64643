"""Self-supervised distillation on a small numpy autograd engine."""

__version__ = "0.1.0"
