"""Seedable closed-loop simulator and library for massive random-access
control: sparse active-user detection, dynamic access-class-barring control
via tabular and actor-critic reinforcement learning, analytical bound
oracles, and an experiment harness."""

from . import bounds, cli, env, harness, nn, rl, saud, td3

__all__ = ["bounds", "cli", "env", "harness", "nn", "rl", "saud", "td3"]
__version__ = "0.1.0"
