"""
Диагностика: проверка градиентов и замер линейной сложности
"""

import logging
import time
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from src.model.nn_blocks import LinearAttnBlock, block_forward, linear_attention
from src.model.ono import ModelConfig, OnoModel
from src.model.ortho_attention import OrthoAttentionLayer, layer_forward
from src.numerics import autodiff as ops
from src.numerics.autodiff import Tensor, grad_check, grad_check_parameters
from src.numerics.seeding import substream

logger = logging.getLogger(__name__)

SCOPES = ('primitive', 'layer', 'model')
GRAD_EPS = 1e-5
PARAM_JITTER = 0.3
LINEAR_FIT_TOLERANCE = 0.3
MIN_TIMING_SECONDS = 0.02


def _perturb(parameters: Dict[str, Tensor], rng: np.random.Generator):
    """Случайный сдвиг параметров от инициализации"""
    for p in parameters.values():
        p.data += rng.normal(0.0, PARAM_JITTER, p.shape)


def _primitive_cases(rng: np.random.Generator) -> List[Tuple[str, Callable[[Tensor], Tensor], np.ndarray]]:
    r = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 5))
    lower = np.tril(rng.standard_normal((4, 4)), -1) + np.diag(rng.uniform(1.0, 2.0, 4))
    weights = rng.standard_normal((3, 4))

    def chol_case(x):
        spd = ops.matmul(x, ops.transpose(x)) + np.eye(3)
        return ops.sum(ops.cholesky(spd) * np.tril(np.ones((3, 3))) * weights[:, :3])

    def attention_case(x):
        return ops.sum(linear_attention(x, ops.scale(x, 0.5), x) * weights)

    return [
        ('gelu', lambda x: ops.sum(ops.gelu(x) * weights), r),
        ('elu', lambda x: ops.sum(ops.elu(x) * weights), r),
        ('tanh', lambda x: ops.sum(ops.tanh(x) * weights), r),
        ('layer_norm', lambda x: ops.sum(ops.layer_norm(x) * weights), r),
        ('matmul', lambda x: ops.sum(ops.square(ops.matmul(x, w))), r),
        ('cholesky', chol_case, r),
        ('solve_lower_t', lambda x: ops.sum(ops.solve_lower_t(x, lower) * weights), r),
        ('linear_attention', attention_case, r),
    ]


def _layer_case(rng: np.random.Generator):
    block = LinearAttnBlock(rng, 8)
    layer = OrthoAttentionLayer(rng, 8, 8, 4)
    g = rng.standard_normal((2, 16, 8))
    h = rng.standard_normal((2, 16, 8))
    # Буфер инициализируется одним train-проходом, проверка идёт в eval
    layer_forward(layer, block_forward(block, g), h, 'train')
    params = {f"block.{n}": p for n, p in block.parameters().items()}
    params.update({f"ortho.{n}": p for n, p in layer.parameters().items()})
    _perturb(params, rng)
    weights = rng.standard_normal((2, 16, 8))
    return (lambda: ops.sum(layer_forward(layer, block_forward(block, g), h, 'eval') * weights)), params


def tiny_model_config(seed: int) -> ModelConfig:
    return ModelConfig(n_layers=1, d=8, d_prime=8, k=4, coord_dim=1, in_channels=1, out_channels=1, seed=seed)


def _model_case(rng: np.random.Generator, seed: int):
    model = OnoModel(tiny_model_config(seed))
    x = np.linspace(0.0, 1.0, 16)
    inputs = np.stack([np.broadcast_to(x, (2, 16)), rng.standard_normal((2, 16))], axis=-1)
    model.forward(inputs, 'train')
    params = model.parameters()
    _perturb(params, rng)
    weights = rng.standard_normal((2, 16, 1))
    return (lambda: ops.sum(model.forward(inputs, 'eval') * weights)), params


def run_grad_check(scope: str, trials: int, seed: int = 0, eps: float = GRAD_EPS) -> pd.DataFrame:
    """
    Сравнение аналитических градиентов с центральными разностями.

    Args:
        scope: 'primitive' | 'layer' | 'model'
        trials: Число случайных точек (seed, seed+1, ...)
        seed: Начальный seed
        eps: Шаг разностей

    Returns:
        Таблица: scope, trial, target, max_rel_error
    """
    if scope not in SCOPES:
        raise ValueError(f"неизвестная область проверки: {scope}")
    rows = []
    for trial in range(trials):
        rng = substream(seed + trial, 'grad-check')
        if scope == 'primitive':
            for name, f, point in _primitive_cases(rng):
                rows.append({'scope': scope, 'trial': trial, 'target': name,
                             'max_rel_error': grad_check(f, point, eps)})
        else:
            loss_fn, params = _layer_case(rng) if scope == 'layer' else _model_case(rng, seed + trial)
            rows.append({'scope': scope, 'trial': trial, 'target': scope,
                         'max_rel_error': grad_check_parameters(loss_fn, params, eps)})
        logger.info("  grad-check %s, попытка %d: %.3e", scope, trial, rows[-1]['max_rel_error'])
    return pd.DataFrame(rows, columns=['scope', 'trial', 'target', 'max_rel_error'])


def _time_call(fn: Callable[[], object], min_seconds: float) -> float:
    """Среднее время одного вызова; вызовы повторяются, пока замер короче min_seconds"""
    calls = 1
    while True:
        start = time.perf_counter()
        for _ in range(calls):
            fn()
        elapsed = time.perf_counter() - start
        if elapsed >= min_seconds:
            return elapsed / calls
        calls *= 2


def bench_linear(m_list: Sequence[int], k: int = 16, width: int = 32, repeats: int = 5,
                 seed: int = 0, batch: int = 8, min_seconds: float = MIN_TIMING_SECONDS) -> Tuple[pd.DataFrame, float]:
    """
    Время layer_forward (eval) в зависимости от M при фиксированном k.

    Каждый замер накапливает не меньше min_seconds, из repeats замеров берётся медиана.

    Returns:
        (таблица M / wall_ms / fit_ms / residual, максимальный относительный остаток линейной подгонки)
    """
    rng = substream(seed, 'bench')
    layer = OrthoAttentionLayer(rng, width, width, k)
    timings = []
    for m in m_list:
        g = rng.standard_normal((batch, m, width))
        h = rng.standard_normal((batch, m, width))
        layer_forward(layer, g, h, 'train')
        samples = [_time_call(lambda: layer_forward(layer, g, h, 'eval'), min_seconds) for _ in range(repeats)]
        timings.append(float(np.median(samples)) * 1000.0)
        logger.info("  M=%d: %.3f мс", m, timings[-1])

    m_arr = np.asarray(m_list, dtype=np.float64)
    t_arr = np.asarray(timings)
    slope, intercept = np.polyfit(m_arr, t_arr, 1) if len(m_arr) > 1 else (t_arr[0] / m_arr[0], 0.0)
    fit = slope * m_arr + intercept
    residual = np.abs(t_arr - fit) / t_arr
    table = pd.DataFrame({'M': m_arr.astype(int), 'wall_ms': t_arr, 'fit_ms': fit, 'residual': residual})
    return table, float(residual.max())
