"""Continual DQN Expansion on a grid rail scheduling simulator."""

__version__ = "0.1.0"
