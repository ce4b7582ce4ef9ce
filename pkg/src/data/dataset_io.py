"""
Набор данных, нормализация и бинарный формат файла

Формат (little-endian):
    "ONOD" | u32 version=1 | u32 N | u32 M | u32 d₀ | u32 d_f | u32 d_u | u8 has_grid
    | [u32 nx | u32 ny | f64 spacing] | payload | u32 CRC32(payload)

payload: точки сетки, затем для каждой пары f и u; всё f64 построчно.
"""

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from src.data.mesh import GridInfo, Mesh, restrict_mesh, restriction_indices
from src.numerics.errors import (
    BadMagic, ChecksumMismatch, CorruptFile, ShapeMismatch, TruncatedFile, VersionUnsupported,
)
from src.numerics.seeding import substream

logger = logging.getLogger(__name__)

MAGIC = b'ONOD'
VERSION = 1
HEADER = struct.Struct('<4sIIIIIIB')
GRID_HEADER = struct.Struct('<IId')
CRC = struct.Struct('<I')
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
STD_FLOOR = 1e-12


@dataclass
class ChannelNormalizer:
    """Поканальные среднее и std для f и u (считаются только по train)"""
    f_mean: np.ndarray
    f_std: np.ndarray
    u_mean: np.ndarray
    u_std: np.ndarray

    @classmethod
    def fit(cls, dataset: 'Dataset') -> 'ChannelNormalizer':
        if dataset.n == 0:
            raise ValueError("нормализатор нельзя обучить на пустом наборе")

        def stats(values: np.ndarray):
            flat = values.reshape(-1, values.shape[-1])
            std = flat.std(axis=0)
            return flat.mean(axis=0), np.where(std > STD_FLOOR, std, 1.0)

        f_mean, f_std = stats(dataset.f)
        u_mean, u_std = stats(dataset.u)
        return cls(f_mean, f_std, u_mean, u_std)

    def encode_f(self, f: np.ndarray) -> np.ndarray:
        return (f - self.f_mean) / self.f_std

    def decode_f(self, f: np.ndarray) -> np.ndarray:
        return f * self.f_std + self.f_mean

    def encode_u(self, u: np.ndarray) -> np.ndarray:
        return (u - self.u_mean) / self.u_std

    def decode_u(self, u: np.ndarray) -> np.ndarray:
        return u * self.u_std + self.u_mean

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {'f_mean': self.f_mean, 'f_std': self.f_std, 'u_mean': self.u_mean, 'u_std': self.u_std}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> 'ChannelNormalizer':
        return cls(*(np.asarray(arrays[k], dtype=np.float64) for k in ('f_mean', 'f_std', 'u_mean', 'u_std')))


@dataclass
class Dataset:
    """
    N пар на общей сетке.

    f: (N, M, d_f), u: (N, M, d_u). provenance в файл не пишется,
    он уходит в манифест запуска.
    """
    mesh: Mesh
    f: np.ndarray
    u: np.ndarray
    provenance: Dict = field(default_factory=dict)
    normalizer: Optional[ChannelNormalizer] = None

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.f.ndim != 3 or self.u.ndim != 3 or self.f.shape[:2] != self.u.shape[:2] \
                or self.f.shape[1] != self.mesh.size:
            raise ShapeMismatch("набор данных", [self.f.shape, self.u.shape, (self.mesh.size,)])

    @property
    def n(self) -> int:
        return self.f.shape[0]

    @property
    def d_f(self) -> int:
        return self.f.shape[2]

    @property
    def d_u(self) -> int:
        return self.u.shape[2]

    def subset(self, indices) -> 'Dataset':
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.mesh, self.f[indices], self.u[indices], dict(self.provenance), self.normalizer)

    def same_content(self, other: 'Dataset') -> bool:
        """Побитовое совпадение сетки и значений"""
        return (self.mesh.grid == other.mesh.grid
                and np.array_equal(self.mesh.points, other.mesh.points)
                and self.f.shape == other.f.shape and self.u.shape == other.u.shape
                and np.array_equal(self.f, other.f) and np.array_equal(self.u, other.u))


def subsample_dataset(dataset: Dataset, factor: int) -> Dataset:
    """Прореживание всех пар набора на одну и ту же подсетку"""
    idx = restriction_indices(dataset.mesh, factor)
    provenance = dict(dataset.provenance, subsample_factor=factor)
    return Dataset(restrict_mesh(dataset.mesh, factor), dataset.f[:, idx], dataset.u[:, idx],
                   provenance, dataset.normalizer)


def split_dataset(dataset: Dataset, seed: int) -> Tuple[Dataset, Dataset, Dataset]:
    """
    Разбиение 80/10/10 после перемешивания подпотоком 'split'.

    Returns:
        (train, val, test)
    """
    perm = substream(seed, 'split').permutation(dataset.n)
    n_train = int(SPLIT_FRACTIONS[0] * dataset.n)
    n_val = int(SPLIT_FRACTIONS[1] * dataset.n)
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    logger.info("  Разбиение: train %d, val %d, test %d", *(len(p) for p in parts))
    return tuple(dataset.subset(p) for p in parts)


def save_dataset(dataset: Dataset, path: Union[str, Path]) -> Path:
    """Запись набора в бинарный файл"""
    path = Path(path)
    mesh = dataset.mesh
    header = HEADER.pack(MAGIC, VERSION, dataset.n, mesh.size, mesh.dim, dataset.d_f, dataset.d_u,
                         1 if mesh.grid is not None else 0)
    if mesh.grid is not None:
        header += GRID_HEADER.pack(mesh.grid.nx, mesh.grid.ny, mesh.grid.spacing)

    # Шаг 1: payload: сетка, затем (f_i, u_i) для каждой пары
    chunks = [mesh.points.astype('<f8').tobytes()]
    for i in range(dataset.n):
        chunks.append(dataset.f[i].astype('<f8').tobytes())
        chunks.append(dataset.u[i].astype('<f8').tobytes())
    payload = b''.join(chunks)

    # Шаг 2: запись с контрольной суммой
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + payload + CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF))
    logger.info("  Сохранено %d пар в %s", dataset.n, path)
    return path


def load_dataset(path: Union[str, Path]) -> Dataset:
    """
    Чтение набора из бинарного файла.

    Raises:
        BadMagic, VersionUnsupported, TruncatedFile, ChecksumMismatch, CorruptFile
    """
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: файл короче заголовка")
    if raw[:4] != MAGIC:
        raise BadMagic(f"{path}: неверная сигнатура {raw[:4]!r}")
    if len(raw) < HEADER.size:
        raise TruncatedFile(f"{path}: файл короче заголовка")
    _, version, n, m, d0, d_f, d_u, has_grid = HEADER.unpack_from(raw, 0)
    if version != VERSION:
        raise VersionUnsupported(f"{path}: версия {version}, поддерживается {VERSION}")
    offset = HEADER.size

    grid = None
    if has_grid:
        if len(raw) < offset + GRID_HEADER.size:
            raise TruncatedFile(f"{path}: обрезан блок сетки")
        nx, ny, spacing = GRID_HEADER.unpack_from(raw, offset)
        grid = GridInfo(nx, ny, spacing)
        offset += GRID_HEADER.size

    payload_len = 8 * (m * d0 + n * m * (d_f + d_u))
    if len(raw) < offset + payload_len + CRC.size:
        raise TruncatedFile(f"{path}: ожидалось {offset + payload_len + CRC.size} байт, есть {len(raw)}")
    payload = raw[offset:offset + payload_len]
    (stored_crc,) = CRC.unpack_from(raw, offset + payload_len)
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise ChecksumMismatch(f"{path}: контрольная сумма не совпадает")
    extra = len(raw) - (offset + payload_len + CRC.size)
    if extra:
        raise CorruptFile(f"{path}: {extra} лишних байт после контрольной суммы")

    values = np.frombuffer(payload, dtype='<f8').astype(np.float64)
    points = values[:m * d0].reshape(m, d0)
    body = values[m * d0:].reshape(n, m * (d_f + d_u))
    f = body[:, :m * d_f].reshape(n, m, d_f)
    u = body[:, m * d_f:].reshape(n, m, d_u)
    logger.info("  Загружено %d пар, M=%d из %s", n, m, path)
    return Dataset(Mesh(points, grid), f.copy(), u.copy())
