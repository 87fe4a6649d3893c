"""Numerical engine for Finsler (alpha, beta)-metrics: tensors, curvature, Ricci flow and identity audits."""

__version__ = "0.1.0"
