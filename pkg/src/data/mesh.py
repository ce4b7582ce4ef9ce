"""
Сетки и пары функций

Регулярная сетка на [0, 1]^d₀: точки перечисляются построчно (индекс i·ny + j,
meshgrid indexing='ij'), одномерная сетка хранится как ny = 1.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import interpolate, spatial

from src.numerics.errors import IncompatibleFactor, NotAGrid, ShapeMismatch


@dataclass(frozen=True)
class GridInfo:
    nx: int
    ny: int
    spacing: float

    @property
    def ndim(self) -> int:
        return 1 if self.ny == 1 else 2


@dataclass
class Mesh:
    """Точки дискретизации X = {x_j}"""
    points: np.ndarray
    grid: Optional[GridInfo] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim == 1:
            self.points = self.points.reshape(-1, 1)
        if self.points.ndim != 2:
            raise ShapeMismatch("точки сетки", [self.points.shape])
        if not np.all(np.isfinite(self.points)):
            raise ValueError("координаты сетки содержат NaN/Inf")
        if self.grid is not None and self.grid.nx * self.grid.ny != len(self.points):
            raise ShapeMismatch("сетка: M != nx·ny", [self.points.shape, (self.grid.nx, self.grid.ny)])

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def grid_mesh(nx: int, ny: Optional[int] = None) -> Mesh:
    """
    Регулярная сетка с шагом 1/(nx−1).

    Args:
        nx: Число узлов по x
        ny: Число узлов по y; None — одномерная сетка
    """
    if nx < 2 or (ny is not None and ny < 2):
        raise ValueError(f"сетка должна иметь хотя бы 2 узла по оси: nx={nx}, ny={ny}")
    spacing = 1.0 / (nx - 1)
    xs = np.linspace(0.0, 1.0, nx)
    if ny is None:
        return Mesh(xs.reshape(-1, 1), GridInfo(nx, 1, spacing))
    ys = np.linspace(0.0, 1.0, ny)
    gx, gy = np.meshgrid(xs, ys, indexing='ij')
    return Mesh(np.stack([gx.ravel(), gy.ravel()], axis=1), GridInfo(nx, ny, spacing))


@dataclass
class FunctionPair:
    """Дискретизация (f_i, u_i) на общей сетке"""
    mesh: Mesh
    f_values: np.ndarray
    u_values: np.ndarray

    def __post_init__(self):
        self.f_values = _as_channels(self.f_values)
        self.u_values = _as_channels(self.u_values)
        m = self.mesh.size
        if self.f_values.shape[0] != m or self.u_values.shape[0] != m:
            raise ShapeMismatch("пара функций: строки не совпадают с сеткой",
                                [self.f_values.shape, self.u_values.shape, (m,)])
        if not (np.all(np.isfinite(self.f_values)) and np.all(np.isfinite(self.u_values))):
            raise ValueError("значения функций содержат NaN/Inf")


def _as_channels(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return v.reshape(-1, 1) if v.ndim == 1 else v


def restriction_indices(mesh: Mesh, factor: int) -> np.ndarray:
    """Индексы узлов, остающихся после прореживания с шагом factor"""
    if mesh.grid is None:
        raise NotAGrid("прореживание требует регулярной сетки")
    if factor < 1:
        raise IncompatibleFactor(f"шаг прореживания должен быть >= 1: {factor}")
    g = mesh.grid
    if (g.nx - 1) % factor or (g.ny > 1 and (g.ny - 1) % factor):
        raise IncompatibleFactor(f"шаг {factor} не делит nx−1={g.nx - 1}")
    ii = np.arange(0, g.nx, factor)
    jj = np.arange(0, g.ny, factor) if g.ny > 1 else np.array([0])
    return (ii[:, None] * g.ny + jj[None, :]).ravel()


def restrict_mesh(mesh: Mesh, factor: int) -> Mesh:
    idx = restriction_indices(mesh, factor)
    g = mesh.grid
    nx = (g.nx - 1) // factor + 1
    ny = (g.ny - 1) // factor + 1 if g.ny > 1 else 1
    return Mesh(mesh.points[idx], GridInfo(nx, ny, g.spacing * factor))


def subsample(pair: FunctionPair, factor: int) -> FunctionPair:
    """
    Сужение пары на прореженную сетку (каждый factor-й узел по каждой оси).

    Raises:
        NotAGrid: нет метаданных решётки
        IncompatibleFactor: factor не делит nx−1
    """
    idx = restriction_indices(pair.mesh, factor)
    return FunctionPair(restrict_mesh(pair.mesh, factor), pair.f_values[idx], pair.u_values[idx])


def resample(mesh: Mesh, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """
    Перенос значений с сетки на произвольные точки.

    На регулярной сетке — линейная интерполяция, иначе ближайший сосед.

    Args:
        mesh: Исходная сетка (M точек)
        values: (..., M, c)
        points: (M′, d₀)

    Returns:
        (..., M′, c)
    """
    values = np.asarray(values, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64).reshape(-1, mesh.dim)
    if values.shape[-2] != mesh.size:
        raise ShapeMismatch("resample: значения не на этой сетке", [values.shape, (mesh.size,)])
    lead = values.shape[:-2]
    channels = values.shape[-1]
    # (M, lead·c): интерполяторы scipy работают с хвостовыми осями значений
    flat = np.moveaxis(values, -2, 0).reshape(mesh.size, -1)

    if mesh.grid is not None and mesh.grid.ndim == 1:
        xs = mesh.points[:, 0]
        out = np.stack([np.interp(points[:, 0], xs, flat[:, c]) for c in range(flat.shape[1])], axis=1)
    elif mesh.grid is not None:
        g = mesh.grid
        axes = (np.unique(mesh.points[:, 0]), np.unique(mesh.points[:, 1]))
        interp = interpolate.RegularGridInterpolator(
            axes, flat.reshape(g.nx, g.ny, -1), method='linear', bounds_error=False, fill_value=None
        )
        out = interp(points)
    else:
        _, nearest = spatial.cKDTree(mesh.points).query(points)
        out = flat[nearest]

    out = out.reshape((points.shape[0],) + lead + (channels,))
    return np.moveaxis(out, 0, -2)


def model_inputs(mesh: Mesh, f_values: np.ndarray) -> np.ndarray:
    """
    Вход модели: координаты, склеенные со значениями f.

    Args:
        mesh: Сетка
        f_values: (N, M, d_f) или (M, d_f)

    Returns:
        (N, M, d₀ + d_f) или (M, d₀ + d_f)
    """
    f = np.asarray(f_values, dtype=np.float64)
    if f.shape[-2] != mesh.size:
        raise ShapeMismatch("model_inputs", [f.shape, mesh.points.shape])
    coords = np.broadcast_to(mesh.points, f.shape[:-1] + (mesh.dim,))
    return np.concatenate([coords, f], axis=-1)
