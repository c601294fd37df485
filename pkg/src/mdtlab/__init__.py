"""Simulation and analysis workbench for arbitration RL agents on two-stage Markov decision tasks."""

__version__ = "0.1.0"
