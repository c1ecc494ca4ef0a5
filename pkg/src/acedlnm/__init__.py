"""Adaptive cumulative exposure distributed lag non-linear models."""
