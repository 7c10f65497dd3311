"""Adversarial-training lab: PGD-AT, TRADES and mean-teacher consistency on a numpy autodiff core."""

__version__ = "0.1.0"
