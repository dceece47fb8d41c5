"""Self-Remixing and remixing-based baselines for self-supervised speech separation."""

__version__ = "0.1.0"
