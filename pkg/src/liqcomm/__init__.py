"""Liquidity-commonality estimation pipeline on daily market/ownership panels."""

__version__ = "0.1.0"
