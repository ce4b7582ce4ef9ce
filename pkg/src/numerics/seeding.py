"""
Именованные потоки случайных чисел

Вся случайность идёт от одного --seed через отдельные подпотоки,
так что изменение порядка батчей не сдвигает инициализацию весов и т.п.
"""

import zlib

import numpy as np

def stream_id(name: str) -> int:
    """Стабильный числовой id потока (не зависит от PYTHONHASHSEED)"""
    return zlib.crc32(name.encode('utf-8'))


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """
    Генератор для подпотока.

    Args:
        seed: Корневой seed запуска
        name: Имя потока ('data', 'init', 'batch-order', ...)
        extra: Доп. индексы, например номер сэмпла

    Returns:
        np.random.Generator на PCG64
    """
    entropy = [int(seed) & 0xFFFFFFFF, stream_id(name)] + [int(e) for e in extra]
    return np.random.default_rng(np.random.SeedSequence(entropy))
