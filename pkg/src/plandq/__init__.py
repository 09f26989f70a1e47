"""Hierarchical sub-goal planning on toy point-mass tasks: diffusion
conductors proposing sub-goals, Q-learning diffusion performers reaching
them, and the flat baselines they are compared against."""

__version__ = "0.1.0"
