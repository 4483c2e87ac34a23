"""Point cloud registration over Barnes-Hut trees: tree construction, classical
rigid alignment, and a small learned registration network with its own autodiff."""

__version__ = "0.1.0"
