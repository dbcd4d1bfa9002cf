"""Koopman-Gramian decomposition of nonlinear control systems."""
