"""Desk-scale lab for perception-aware policy optimization.

Trains a tiny differentiable multimodal policy on synthetic
vision-dependent tasks with grpo/dapo-style objectives and their
perception-aware variants, and records the diagnostics needed to study
training collapse.
"""

__version__ = "0.1.0"
