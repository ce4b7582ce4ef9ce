"""
Ортогональное внимание

ĝ = g·w_q — сырые собственные отображения. Их ковариация C накапливается
скользящим средним в буфере, L = chol(C), ψ̂ = ĝ·L^{-T} — ортонормированные
нейронные собственные функции. Обновление скрытых состояний:

    h ← FFN(LN(ψ̂_out · diag(μ̂) · (1/M) ψ̂_inᵀ h · w_v + h))
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from src.model.nn_blocks import FeedForward, LayerNorm, init_weight, prefixed_parameters
from src.numerics import autodiff as ops
from src.numerics import linalg
from src.numerics.autodiff import Tensor
from src.numerics.errors import BufferNotInitialized, ShapeMismatch

logger = logging.getLogger(__name__)

EIGENMAP_NORMS = ('ortho', 'layer_norm', 'none')
MODES = ('train', 'eval')


@dataclass
class CovarianceBuffer:
    """EMA-оценка ковариации собственных отображений и её фактор Холецкого"""
    k: int
    momentum: float = 0.1
    c: np.ndarray = None
    chol: np.ndarray = None
    initialized: bool = False
    jitter: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.momentum <= 1.0:
            raise ValueError(f"momentum вне (0, 1]: {self.momentum}")
        if self.c is None:
            self.c = np.zeros((self.k, self.k))
        if self.chol is None:
            self.chol = np.zeros((self.k, self.k))

    def set(self, c: np.ndarray):
        """Записать ковариацию и пересчитать фактор"""
        c = np.asarray(c, dtype=np.float64)
        if c.shape != (self.k, self.k):
            raise ShapeMismatch("ковариация буфера", [c.shape, (self.k, self.k)])
        c = 0.5 * (c + c.T)
        chol, jitter = linalg.cholesky(c, return_jitter=True)
        self.c = c
        self.chol = chol
        self.jitter = jitter
        self.initialized = True


def batch_covariance(ghat: np.ndarray) -> np.ndarray:
    """(1/(N·M)) Σ ĝᵀĝ по всем сэмплам и точкам"""
    flat = np.asarray(ghat, dtype=np.float64).reshape(-1, ghat.shape[-1])
    return flat.T @ flat / flat.shape[0]


def update_covariance(buffer: CovarianceBuffer, ghat_batch, mode: str) -> CovarianceBuffer:
    """
    Шаг EMA для буфера ковариации.

    Первый батч копирует ковариацию целиком, далее
    c ← (1 − momentum)·c + momentum·batch_cov. В eval буфер не меняется.

    Args:
        buffer: Буфер слоя
        ghat_batch: (N, M, k) или (M, k)
        mode: 'train' | 'eval'

    Returns:
        Тот же буфер
    """
    if mode not in MODES:
        raise ValueError(f"неизвестный режим: {mode}")
    if mode == 'eval':
        return buffer
    data = ghat_batch.data if isinstance(ghat_batch, Tensor) else np.asarray(ghat_batch, dtype=np.float64)
    if data.shape[-1] != buffer.k:
        raise ShapeMismatch("update_covariance", [data.shape, (buffer.k,)])
    cov = batch_covariance(data)
    if buffer.initialized:
        cov = (1.0 - buffer.momentum) * buffer.c + buffer.momentum * cov
    buffer.set(cov)
    return buffer


def orthonormalize(buffer: CovarianceBuffer, ghat) -> Tensor:
    """ψ̂ = ĝ·L^{-T}; L для автодиффа константа"""
    if not buffer.initialized:
        raise BufferNotInitialized("буфер ковариации не инициализирован: нужен хотя бы один train-проход")
    return ops.solve_lower_t(ghat, Tensor(buffer.chol))


class OrthoAttentionLayer:
    """
    Слой ортогонального внимания одного этапа.

    Args:
        rng: Генератор инициализации
        d_prime: Ширина признаков нижнего потока
        d: Ширина скрытых состояний
        k: Число собственных отображений
        out_dim: Выход FFN (d, а на последнем этапе — d_u)
    """

    def __init__(self, rng: np.random.Generator, d_prime: int, d: int, k: int, out_dim: Optional[int] = None,
                 ffn_mult: int = 4, momentum: float = 0.1, attn_normalization: bool = True,
                 eigenmap_norm: str = 'ortho', whitening_grad: bool = False):
        if eigenmap_norm not in EIGENMAP_NORMS:
            raise ValueError(f"неизвестная нормализация собственных отображений: {eigenmap_norm}")
        self.k = k
        self.w_q = init_weight(rng, d_prime, k)
        self.w_v = init_weight(rng, d, d)
        self.raw_mu = Tensor(np.zeros(k), grad_required=True)
        self.norm = LayerNorm(d)
        self.ffn = FeedForward(rng, d, ffn_mult * d, d if out_dim is None else out_dim)
        self.buffer = CovarianceBuffer(k, momentum)
        self.attn_normalization = attn_normalization
        self.eigenmap_norm = eigenmap_norm
        self.whitening_grad = whitening_grad

    @property
    def mu(self) -> np.ndarray:
        return np.exp(self.raw_mu.data)

    def parameters(self) -> Dict[str, Tensor]:
        params = {'w_q': self.w_q, 'w_v': self.w_v, 'raw_mu': self.raw_mu}
        params.update(prefixed_parameters({'norm': self.norm, 'ffn': self.ffn}))
        return params

    def output(self, z) -> Tensor:
        """FFN(LN(z))"""
        return self.ffn(self.norm(z))


def project(layer: OrthoAttentionLayer, g) -> Tensor:
    g = ops.as_tensor(g)
    if g.shape[-1] != layer.w_q.shape[0]:
        raise ShapeMismatch("project: ширина признаков", [g.shape, layer.w_q.shape])
    return ops.matmul(g, layer.w_q)


def eigenmaps(layer: OrthoAttentionLayer, g, mode: str) -> Tensor:
    """
    ψ̂ для признаков g.

    В train буфер обновляется до ортонормализации. При whitening_grad
    в train используется ковариация текущего батча с градиентом через Холецкого.
    """
    ghat = project(layer, g)
    if layer.eigenmap_norm == 'layer_norm':
        return ops.layer_norm(ghat)
    if layer.eigenmap_norm == 'none':
        return ghat

    update_covariance(layer.buffer, ghat, mode)
    if mode == 'train' and layer.whitening_grad:
        flat = ops.reshape(ghat, (-1, layer.k))
        cov = ops.scale(ops.matmul(ops.transpose(flat), flat), 1.0 / flat.shape[0])
        return ops.solve_lower_t(ghat, ops.cholesky(cov))
    return orthonormalize(layer.buffer, ghat)


def attend(layer: OrthoAttentionLayer, psi_out, psi_in, h, mu=None) -> Tensor:
    """
    ψ̂_out · diag(μ̂) · (1/M) ψ̂_inᵀ h · w_v

    Args:
        layer: Слой (w_v, μ̂, флаг нормализации)
        psi_out: (..., M′, k)
        psi_in: (..., M, k)
        h: (..., M, d)
        mu: Явные собственные значения вместо exp(raw_mu)

    Returns:
        (..., M′, d)
    """
    psi_out, psi_in, h = ops.as_tensor(psi_out), ops.as_tensor(psi_in), ops.as_tensor(h)
    if psi_in.shape[-2] != h.shape[-2] or psi_out.shape[-1] != psi_in.shape[-1]:
        raise ShapeMismatch("attend", [psi_out.shape, psi_in.shape, h.shape])
    if h.shape[-1] != layer.w_v.shape[0]:
        raise ShapeMismatch("attend: ширина h", [h.shape, layer.w_v.shape])

    coeff = ops.matmul(ops.transpose(psi_in), h)             # (..., k, d)
    if layer.attn_normalization:
        coeff = ops.scale(coeff, 1.0 / psi_in.shape[-2])
    scale = ops.exp(layer.raw_mu) if mu is None else Tensor(np.asarray(mu, dtype=np.float64))
    coeff = coeff * ops.reshape(scale, (layer.k, 1))
    return ops.matmul(ops.matmul(psi_out, coeff), layer.w_v)


def layer_forward(layer: OrthoAttentionLayer, g, h, mode: str) -> Tensor:
    """FFN(LN(attend(ψ̂, ψ̂, h) + h))"""
    h = ops.as_tensor(h)
    psi = eigenmaps(layer, g, mode)
    return layer.output(attend(layer, psi, psi, h) + h)


def attention_matrix(layer: OrthoAttentionLayer, psi) -> np.ndarray:
    """Индуцированная матрица внимания ψ̂ diag(μ̂) ψ̂ᵀ (M×M, только для диагностики)"""
    p = psi.data if isinstance(psi, Tensor) else np.asarray(psi, dtype=np.float64)
    return (p * layer.mu) @ p.T
