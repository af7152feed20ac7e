"""Self-evolving questioner/reasoner reinforcement learning on a scene microworld."""

__version__ = "0.1.0"
