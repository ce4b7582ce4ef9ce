"""
Относительная L2-ошибка: ‖pred − target‖₂ / ‖target‖₂
"""

import numpy as np

from src.numerics import autodiff as ops
from src.numerics.autodiff import Tensor
from src.numerics.errors import ShapeMismatch, ZeroTarget

ZERO_TARGET_NORM = 1e-12


def relative_l2(pred, target) -> float:
    """Ошибка одной пары по сплющенным значениям"""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch("relative_l2", [pred.shape, target.shape])
    norm = np.linalg.norm(target.ravel())
    if norm < ZERO_TARGET_NORM:
        raise ZeroTarget(f"норма цели {norm:.3e} < {ZERO_TARGET_NORM}")
    return float(np.linalg.norm((pred - target).ravel()) / norm)


def relative_l2_per_sample(pred, target) -> np.ndarray:
    """(N, M, d_u) → N ошибок"""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 3:
        raise ShapeMismatch("relative_l2_per_sample", [pred.shape, target.shape])
    return np.array([relative_l2(p, t) for p, t in zip(pred, target)])


def relative_l2_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """
    Среднее по парам батча, дифференцируемо по pred.

    Args:
        pred: (N, M, d_u)
        target: (N, M, d_u)
    """
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 3:
        raise ShapeMismatch("relative_l2_loss", [pred.shape, target.shape])
    norms = np.sqrt(np.sum(target * target, axis=(1, 2)))
    if np.any(norms < ZERO_TARGET_NORM):
        raise ZeroTarget(f"в батче есть цель с нормой < {ZERO_TARGET_NORM}")
    diff = ops.sum(ops.square(pred - target), axis=(1, 2))
    return ops.mean(ops.sqrt(diff) / norms)
