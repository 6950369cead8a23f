"""
Central finite-difference gradients for checking analytic backward passes.
"""

import logging
from typing import Callable, Dict, Optional

import numpy as np

from core.patterns import MaskMatrix
from ml.attention import AttnTensors, Gradients, NO_MOD, ScoreMod, backward, dense_forward

logger = logging.getLogger(__name__)

FD_STEP = 1e-5


def numerical_gradient(loss: Callable[[], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """
    d loss / d x by central differences, perturbing x in place.

    Args:
        loss: closure reading x
        x: float array, restored entry by entry
        h: step size

    Returns:
        array shaped like x
    """
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        original = x[idx]
        x[idx] = original + h
        plus = loss()
        x[idx] = original - h
        minus = loss()
        x[idx] = original
        grad[idx] = (plus - minus) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| normalized by the largest gradient magnitude of either side"""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric))) / scale


def check_attention_gradients(t: AttnTensors, mask: MaskMatrix, mod: ScoreMod = NO_MOD,
                              grad_out: Optional[np.ndarray] = None, seed: int = 0,
                              h: float = FD_STEP, analytic: Optional[Gradients] = None) -> Dict[str, float]:
    """
    Compare analytic gradients of sum(dense_forward(...) * grad_out) against
    finite differences.

    Args:
        analytic: gradients to check (default: dense backward over mask)

    Returns:
        max relative error per input: q, k, v and rpb when present
    """
    if grad_out is None:
        grad_out = np.random.default_rng(seed).standard_normal(t.q.shape).astype(t.dtype)
    if analytic is None:
        analytic = backward(t, mask, mod, grad_out)

    def loss() -> float:
        return float(np.sum(dense_forward(t, mask, mod) * grad_out))

    errors = {
        "q": max_relative_error(analytic.dq, numerical_gradient(loss, t.q, h)),
        "k": max_relative_error(analytic.dk, numerical_gradient(loss, t.k, h)),
        "v": max_relative_error(analytic.dv, numerical_gradient(loss, t.v, h)),
    }
    if mod.active:
        errors["rpb"] = max_relative_error(analytic.drpb, numerical_gradient(loss, mod.rpb_table, h))

    logger.debug(f"Gradient check max relative errors: {errors}")
    return errors
