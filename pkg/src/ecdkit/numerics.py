"""Small numerical helpers used throughout the package.

All probability work happens in log space with max subtraction so that
distributions sum to 1 within float tolerance and masked entries come out
as exact zeros.
"""

import numpy as np

# Clamp applied inside every log of a probability.
EPS_PROB = 1e-12
# Hallucination scores are kept strictly inside (0, 1).
EPS_SCORE = 1e-6
# Standard deviations below this are treated as degenerate.
EPS_STD = 1e-8


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable softmax; -inf entries map to exact zeros."""
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    s = x - m
    return s - np.log(np.sum(np.exp(s), axis=axis, keepdims=True))


def safe_log(p: np.ndarray | float) -> np.ndarray | float:
    """log with the probability clamped from below at EPS_PROB."""
    return np.log(np.maximum(p, EPS_PROB))


def sigmoid(x: np.ndarray | float) -> np.ndarray | float:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def entropy_term(p: np.ndarray) -> np.ndarray:
    """-p * log p with the 0 * log 0 := 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    return np.where(p > 0.0, -p * np.log(np.maximum(p, EPS_PROB)), 0.0)
