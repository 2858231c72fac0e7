"""Input checks shared by the estimators."""

from __future__ import annotations

from typing import Optional

import numpy as np


def as_frames(X, dim: Optional[int] = None, name: str = "X") -> np.ndarray:
    """Coerce to a finite 2-D float64 frame matrix, optionally checking width."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {X.shape}")
    if dim is not None and X.shape[1] != dim:
        raise ValueError(f"{name} has dimension {X.shape[1]}, expected {dim}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def stack_utterances(X) -> np.ndarray:
    """Accept a frame matrix or a list of per-utterance matrices."""
    if isinstance(X, np.ndarray):
        return as_frames(X)
    mats = [as_frames(x) for x in X]
    if not mats:
        raise ValueError("empty data")
    return np.vstack(mats)


def check_posteriors(post, tol: float = 1e-6) -> np.ndarray:
    post = np.asarray(post, dtype=np.float64)
    if post.ndim != 2:
        raise ValueError(f"posteriors must be 2-D, got shape {post.shape}")
    if np.any(post < 0):
        t = int(np.argmax((post < 0).any(axis=1)))
        raise ValueError(f"negative posterior in frame {t}")
    err = np.abs(post.sum(axis=1) - 1.0)
    if post.shape[0] and err.max() > tol:
        t = int(np.argmax(err))
        raise ValueError(f"posterior row for frame {t} sums to {post[t].sum():.9g}, not 1")
    return post
