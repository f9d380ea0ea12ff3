"""Federated DQN charging agents governed by escrow contracts on a simulated ledger."""

__version__ = "0.1.0"
