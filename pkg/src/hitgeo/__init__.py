"""Hitting-time geometry learning, exact oracles and asymmetric graph planning."""
