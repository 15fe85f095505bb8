"""Object counting in a robotic grasp from multi-view images via supervised contrastive learning."""

__version__ = "0.1.0"
