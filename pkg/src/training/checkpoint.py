"""
Бинарный чекпоинт модели и оптимизатора

Формат (little-endian):
    "ONOC" | u32 version | JSON ModelConfig | параметры | буферы ковариации
    | состояние оптимизатора | JSON extras | именованные массивы extras | u32 CRC32

JSON и имена — с префиксом длины u32, массивы — u32 ndim, u32 shape..., f64 данные.
CRC32 считается по всему, что ему предшествует.
"""

import io
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from src.data.dataset_io import ChannelNormalizer
from src.model.ono import ModelConfig, OnoModel
from src.numerics.errors import (
    BadMagic, ChecksumMismatch, CorruptFile, ShapeMismatch, TruncatedFile, VersionUnsupported,
)
from src.training.optim import ScheduleConfig, TrainState

logger = logging.getLogger(__name__)

MAGIC = b'ONOC'
VERSION = 1
U8 = struct.Struct('<B')
U32 = struct.Struct('<I')
U64 = struct.Struct('<Q')
F64 = struct.Struct('<d')


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def raw(self, data: bytes):
        self.buf.write(data)

    def u8(self, x: int):
        self.raw(U8.pack(x))

    def u32(self, x: int):
        self.raw(U32.pack(x))

    def u64(self, x: int):
        self.raw(U64.pack(x))

    def f64(self, x: float):
        self.raw(F64.pack(x))

    def text(self, s: str):
        data = s.encode('utf-8')
        self.u32(len(data))
        self.raw(data)

    def array(self, a: np.ndarray):
        a = np.asarray(a, dtype=np.float64)
        self.u32(a.ndim)
        for n in a.shape:
            self.u32(n)
        self.raw(a.astype('<f8').tobytes())

    def named_arrays(self, arrays: Dict[str, np.ndarray]):
        self.u32(len(arrays))
        for name, a in arrays.items():
            self.text(name)
            self.array(a)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(f"{self.source}: чекпоинт обрезан на смещении {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return U8.unpack(self.raw(U8.size))[0]

    def u32(self) -> int:
        return U32.unpack(self.raw(U32.size))[0]

    def u64(self) -> int:
        return U64.unpack(self.raw(U64.size))[0]

    def f64(self) -> float:
        return F64.unpack(self.raw(F64.size))[0]

    def text(self) -> str:
        return self.raw(self.u32()).decode('utf-8')

    def array(self) -> np.ndarray:
        shape = tuple(self.u32() for _ in range(self.u32()))
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.raw(8 * count), dtype='<f8').astype(np.float64).reshape(shape)

    def named_arrays(self) -> Dict[str, np.ndarray]:
        return {self.text(): self.array() for _ in range(self.u32())}


@dataclass
class Checkpoint:
    model: OnoModel
    state: Optional[TrainState] = None
    extras: Dict = field(default_factory=dict)
    normalizer: Optional[ChannelNormalizer] = None


def save_checkpoint(path: Union[str, Path], model: OnoModel, state: Optional[TrainState] = None,
                    extras: Optional[Dict] = None, normalizer: Optional[ChannelNormalizer] = None) -> Path:
    """
    Запись модели, буферов и (опционально) состояния оптимизатора.

    Args:
        path: Файл чекпоинта
        model: Модель
        state: Состояние обучения
        extras: JSON-совместимые метаданные (разрешение обучения, конфиг обучения, ...)
        normalizer: Статистики нормализации
    """
    w = _Writer()
    w.raw(MAGIC)
    w.u32(VERSION)
    w.text(json.dumps(model.config.to_dict(), sort_keys=True))

    # Шаг 1: параметры
    w.named_arrays({name: p.data for name, p in model.parameters().items()})

    # Шаг 2: буферы ковариации
    buffers = model.buffers()
    w.u32(len(buffers))
    for name, buf in buffers.items():
        w.text(name)
        w.u8(1 if buf.initialized else 0)
        w.f64(buf.momentum)
        w.f64(buf.jitter)
        w.array(buf.c)
        w.array(buf.chol)

    # Шаг 3: оптимизатор
    w.u8(1 if state is not None else 0)
    if state is not None:
        w.u64(state.step)
        w.u64(state.schedule_step)
        w.u64(state.skipped_steps)
        w.f64(state.best_val)
        w.named_arrays(state.m)
        w.named_arrays(state.v)

    # Шаг 4: метаданные
    meta = dict(extras or {})
    if state is not None:
        meta['schedule'] = state.schedule.to_dict()
        meta['rng_state'] = state.rng_state
    w.text(json.dumps(meta, sort_keys=True))
    w.named_arrays(normalizer.to_arrays() if normalizer is not None else {})

    body = w.buf.getvalue()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + U32.pack(zlib.crc32(body) & 0xFFFFFFFF))
    logger.info("  Чекпоинт сохранён: %s", path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Восстановление модели и состояния из файла.

    Raises:
        BadMagic, VersionUnsupported, TruncatedFile, ChecksumMismatch, CorruptFile
    """
    data = Path(path).read_bytes()
    source = str(path)
    if len(data) < 4 + U32.size * 2:
        raise TruncatedFile(f"{source}: файл короче заголовка")
    if data[:4] != MAGIC:
        raise BadMagic(f"{source}: неверная сигнатура {data[:4]!r}")
    body, (crc,) = data[:-U32.size], U32.unpack(data[-U32.size:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch(f"{source}: контрольная сумма не совпадает")

    r = _Reader(body, source)
    r.raw(4)
    version = r.u32()
    if version != VERSION:
        raise VersionUnsupported(f"{source}: версия {version}, поддерживается {VERSION}")
    model = OnoModel(ModelConfig.from_dict(json.loads(r.text())))

    params = model.parameters()
    for name, value in r.named_arrays().items():
        if name not in params or params[name].shape != value.shape:
            raise ShapeMismatch(f"{source}: параметр {name} не совпадает с архитектурой",
                                [value.shape, params[name].shape if name in params else ()])
        params[name].data[...] = value

    buffers = model.buffers()
    for _ in range(r.u32()):
        name = r.text()
        initialized = bool(r.u8())
        momentum, jitter = r.f64(), r.f64()
        c, chol = r.array(), r.array()
        if name not in buffers:
            raise CorruptFile(f"{source}: неизвестный буфер {name}")
        buf = buffers[name]
        buf.momentum, buf.jitter, buf.c, buf.chol, buf.initialized = momentum, jitter, c, chol, initialized

    state = None
    if r.u8():
        step, schedule_step, skipped = r.u64(), r.u64(), r.u64()
        best_val = r.f64()
        m, v = r.named_arrays(), r.named_arrays()
        state = TrainState(parameters=params, model=model, m=m, v=v, step=step, schedule_step=schedule_step,
                           best_val=best_val, skipped_steps=skipped)

    extras = json.loads(r.text())
    if state is not None:
        if extras.get('schedule'):
            state.schedule = ScheduleConfig.from_dict(extras['schedule'])
        state.rng_state = extras.get('rng_state')
    arrays = r.named_arrays()
    normalizer = ChannelNormalizer.from_arrays(arrays) if arrays else None
    if r.pos != len(body):
        raise CorruptFile(f"{source}: {len(body) - r.pos} лишних байт перед контрольной суммой")
    logger.info("  Чекпоинт загружен: %s", source)
    return Checkpoint(model, state, extras, normalizer)
