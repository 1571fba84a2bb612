"""Approach-constrained 6-DOF grasp sampling, refinement and benchmarking."""

__version__ = "0.1.0"
