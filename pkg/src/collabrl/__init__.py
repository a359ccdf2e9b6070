"""Collaborative multi-user reinforcement learning with low-rank rewards."""

__version__ = "0.1.0"
