"""Cooperative multi-agent Q-learning with learned communication over a
simulated wireless channel, mixed by a graph-conditioned value network."""

__version__ = "0.1.0"
