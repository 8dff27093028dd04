"""Input validation helpers shared by the estimators and the functional cores."""

import hashlib

import numpy as np
from sklearn.utils.validation import check_array


def check_points(X, name="points", allow_empty=False):
    """Return ``X`` as a finite float64 array of shape (n, 3)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1 and X.shape[0] == 3:
        X = X[None, :]
    if X.size == 0 and allow_empty:
        return X.reshape(0, 3)
    X = check_array(X, dtype=np.float64, ensure_all_finite=True, input_name=name)
    if X.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {X.shape}")
    return X


def check_vector(v, dim, name="vector"):
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != dim:
        raise ValueError(f"{name} must have {dim} entries, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


def check_codes(Z, dim, name="codes"):
    """Return ``Z`` as a finite (n, dim) float64 array; a single vector is promoted."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[None, :]
    Z = check_array(Z, dtype=np.float64, ensure_all_finite=True, input_name=name)
    if Z.shape[1] != dim:
        raise ValueError(f"{name} must have {dim} columns, got {Z.shape[1]}")
    return Z


def derive_seed(master, *labels):
    """Domain-separated sub-seed: blake2b over the master seed and a label path.

    Sub-seeds for different labels are independent streams, and the mapping is
    stable across platforms and Python versions (no reliance on ``hash()``).
    """
    h = hashlib.blake2b(digest_size=8, person=b"flowsdf-seed")
    h.update(str(int(master)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little") >> 1
