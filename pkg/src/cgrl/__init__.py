"""Hierarchical reinforcement learning on a graph of contact configuration spaces.

A small, self-contained stack: dense NN kernels with analytic backprop,
soft actor-critic, an attention-based state classifier (Selector), a
semi-Markov meta-controller (Evaluator), analytic surrogate environments,
and a CLI training harness with CSV metrics and binary checkpoints.
"""

__version__ = "0.1.0"
