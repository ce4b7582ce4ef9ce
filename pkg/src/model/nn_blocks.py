"""
Нижний поток ONO: энкодер и блок линейного трансформера

Энкодер поточечно поднимает (x_j, f(x_j)) в признаки g (ширина d′) и
скрытые состояния h (ширина d). Блок — pre-LN трансформер с линейным
вниманием φ(x) = elu(x) + 1.
"""

from typing import Dict, Optional, Tuple

import numpy as np
from scipy import stats

from src.numerics import autodiff as ops
from src.numerics.autodiff import Tensor

INIT_STD = 0.02
LINEAR_ATTN_EPS = 1e-6


def init_weight(rng: np.random.Generator, d_in: int, d_out: int, std: float = INIT_STD) -> Tensor:
    """Усечённое нормальное распределение (±2σ)"""
    w = stats.truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=(d_in, d_out), random_state=rng)
    return Tensor(np.asarray(w, dtype=np.float64).reshape(d_in, d_out), grad_required=True)


class Dense:
    """y = x W (+ b)"""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = init_weight(rng, d_in, d_out)
        self.bias = Tensor(np.zeros(d_out), grad_required=True) if bias else None

    def __call__(self, x) -> Tensor:
        y = ops.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y

    def parameters(self) -> Dict[str, Tensor]:
        params = {'weight': self.weight}
        if self.bias is not None:
            params['bias'] = self.bias
        return params


class LayerNorm:
    """LN с аффинной частью; параметры не участвуют в weight decay"""

    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim), grad_required=True)
        self.beta = Tensor(np.zeros(dim), grad_required=True)

    def __call__(self, x) -> Tensor:
        return ops.layer_norm(x) * self.gamma + self.beta

    def parameters(self) -> Dict[str, Tensor]:
        return {'gamma': self.gamma, 'beta': self.beta}


class FeedForward:
    """Двухслойная FFN: d_in → hidden → d_out с GELU"""

    def __init__(self, rng: np.random.Generator, d_in: int, hidden: int, d_out: int):
        self.inner = Dense(rng, d_in, hidden)
        self.outer = Dense(rng, hidden, d_out)

    def __call__(self, x) -> Tensor:
        return self.outer(ops.gelu(self.inner(x)))

    def parameters(self) -> Dict[str, Tensor]:
        return prefixed_parameters({'inner': self.inner, 'outer': self.outer})


def prefixed_parameters(children: Dict[str, object]) -> Dict[str, Tensor]:
    params = {}
    for prefix, child in children.items():
        for name, p in child.parameters().items():
            params[f"{prefix}.{name}"] = p
    return params


class EncoderMlp:
    """
    Поточечный энкодер: общий ствол (ширина 2d′) и две головы.

    Голова g — признаки нижнего потока (d′), голова h — состояния решения (d).
    """

    def __init__(self, rng: np.random.Generator, d_in: int, d_prime: int, d: int):
        self.d_in = d_in
        self.trunk = Dense(rng, d_in, 2 * d_prime)
        self.head_g = Dense(rng, 2 * d_prime, d_prime)
        self.head_h = Dense(rng, 2 * d_prime, d)

    def parameters(self) -> Dict[str, Tensor]:
        return prefixed_parameters({'trunk': self.trunk, 'head_g': self.head_g, 'head_h': self.head_h})


def encode(enc: EncoderMlp, f) -> Tuple[Tensor, Tensor]:
    """
    Подъём (x_j, f(x_j)) в g^(1) и h^(1).

    Args:
        enc: Энкодер
        f: (..., M, d₀ + d_f) — координаты, склеенные со значениями

    Returns:
        (g: (..., M, d′), h: (..., M, d))
    """
    f = ops.as_tensor(f)
    hidden = ops.gelu(enc.trunk(f))
    return enc.head_g(hidden), enc.head_h(hidden)


def feature_map(x) -> Tensor:
    return ops.elu(x) + 1.0


def linear_attention(q, k, v, eps: float = LINEAR_ATTN_EPS) -> Tensor:
    """
    Линейное внимание с φ(x) = elu(x) + 1.

    out_i = φ(q_i) [Σ_j φ(k_j)ᵀ v_j] / (φ(q_i) · Σ_j φ(k_j) + eps)

    Запросы могут жить на другой сетке, чем ключи/значения (кросс-внимание).
    Сложность линейна по числу точек.
    """
    q, k, v = ops.as_tensor(q), ops.as_tensor(k), ops.as_tensor(v)
    phi_q, phi_k = feature_map(q), feature_map(k)
    kv = ops.matmul(ops.transpose(phi_k), v)                 # (..., d′, d′)
    k_sum = ops.sum(phi_k, axis=-2, keepdims=True)          # (..., 1, d′)
    numerator = ops.matmul(phi_q, kv)                        # (..., Mq, d′)
    denominator = ops.sum(phi_q * k_sum, axis=-1, keepdims=True) + eps
    return numerator / denominator


class LinearAttnBlock:
    """g̃ = g + Attn(LN(g)); out = g̃ + FFN(LN(g̃))"""

    def __init__(self, rng: np.random.Generator, d_prime: int, ffn_mult: int = 4):
        self.query = Dense(rng, d_prime, d_prime, bias=False)
        self.key = Dense(rng, d_prime, d_prime, bias=False)
        self.value = Dense(rng, d_prime, d_prime, bias=False)
        self.norm_attn = LayerNorm(d_prime)
        self.norm_ffn = LayerNorm(d_prime)
        self.ffn = FeedForward(rng, d_prime, ffn_mult * d_prime, d_prime)

    def parameters(self) -> Dict[str, Tensor]:
        return prefixed_parameters({
            'query': self.query, 'key': self.key, 'value': self.value,
            'norm_attn': self.norm_attn, 'norm_ffn': self.norm_ffn, 'ffn': self.ffn,
        })


def block_forward(block: LinearAttnBlock, g, context: Optional[Tensor] = None) -> Tensor:
    """
    Прямой проход блока.

    Args:
        block: Блок
        g: (..., M, d′)
        context: Признаки другой сетки для ключей/значений; None — самовнимание
    """
    g = ops.as_tensor(g)
    normed = block.norm_attn(g)
    source = normed if context is None else block.norm_attn(context)
    g_tilde = g + linear_attention(block.query(normed), block.key(source), block.value(source))
    return g_tilde + block.ffn(block.norm_ffn(g_tilde))
