"""Shared fixtures: small fitted models on simulated data."""
import numpy as np

from koopdec.checks import random_fitted_model  # noqa: F401 - re-exported for the tests
from koopdec.dictionary import IdentityDictionary
from koopdec.koopman import KoopmanModel


def identity_model(n, K_x=None, K_u=None, W_h=None):
    """Identity-dictionary model; defaults give X_o = X_c = I."""
    K_x = np.zeros((n, n)) if K_x is None else np.asarray(K_x, dtype=float)
    K_u = np.eye(n) if K_u is None else np.asarray(K_u, dtype=float)
    W_h = np.eye(n) if W_h is None else np.asarray(W_h, dtype=float)
    return KoopmanModel(IdentityDictionary(n), IdentityDictionary(K_u.shape[1]), K_x, K_u, W_h)
