"""Weighted iterative guess estimation for bounded survey distributions."""
