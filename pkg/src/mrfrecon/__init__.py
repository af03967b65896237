"""MR fingerprinting simulation, dictionary matching and RNN/CNN regression."""

__version__ = "0.1.0"
