"""Slow-mode discovery on lattice Markov models with time-lagged autoencoders
and state-free reversible VAMPnets."""

__version__ = "0.1.0"
