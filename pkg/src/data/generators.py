"""
Синтетические наборы данных PDE

- Darcy: −∇·(a∇u) = 1, u = 0 на границе; a — пороговое гауссово поле (12 / 3)
- Poisson1D: −u'' = f с f из низкочастотного синус-ряда, решение аналитическое

Каждый сэмпл берёт свой генератор substream(seed, 'data', i), поэтому
результат не зависит от числа потоков.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import fft
from tqdm import tqdm

from src.data.dataset_io import Dataset
from src.data.mesh import grid_mesh
from src.numerics.linalg import SparseSystem, conjugate_gradient
from src.numerics.seeding import substream

logger = logging.getLogger(__name__)

DARCY_HIGH = 12.0
DARCY_LOW = 3.0
GRF_LENGTH_SCALE = 0.1
CG_TOL = 1e-10
POISSON_MODES = 4
MIN_DARCY_RESOLUTION = 8


def assemble_diffusion_system(a: np.ndarray, spacing: float) -> Tuple[SparseSystem, np.ndarray]:
    """
    Конечно-разностная матрица −∇·(a∇·) по внутренним узлам.

    Коэффициент на грани — среднее арифметическое соседних узлов.
    Граничные узлы — нулевой Дирихле и в систему не входят.

    Args:
        a: Узловой коэффициент формы (nx,) или (nx, ny)
        spacing: Шаг сетки h

    Returns:
        (SPD-система, массив индексов неизвестных той же формы, −1 на границе)
    """
    a = np.asarray(a, dtype=np.float64)
    shape = a.shape
    inner_shape = tuple(n - 2 for n in shape)
    if any(n < 1 for n in inner_shape):
        raise ValueError(f"сетка {shape} не содержит внутренних узлов")

    unknowns = int(np.prod(inner_shape))
    index = -np.ones(shape, dtype=np.int64)
    centre = (slice(1, -1),) * a.ndim
    index[centre] = np.arange(unknowns).reshape(inner_shape)
    me = index[centre]

    inv_h2 = 1.0 / (spacing * spacing)
    diag = np.zeros(inner_shape)
    rows, cols, vals = [], [], []
    for axis in range(a.ndim):
        for step in (-1, 1):
            neighbour = list(centre)
            neighbour[axis] = slice(1 + step, shape[axis] - 1 + step)
            neighbour = tuple(neighbour)
            face = 0.5 * (a[centre] + a[neighbour]) * inv_h2
            diag += face
            nb = index[neighbour]
            inside = nb >= 0
            rows.append(me[inside])
            cols.append(nb[inside])
            vals.append(-face[inside])
    rows.append(me.ravel())
    cols.append(me.ravel())
    vals.append(diag.ravel())

    system = SparseSystem(unknowns, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), spd=True)
    return system, index


def solve_diffusion(a: np.ndarray, spacing: float, tol: float = CG_TOL) -> np.ndarray:
    """Решение −∇·(a∇u) = 1 с нулём на границе; u той же формы, что и a"""
    system, index = assemble_diffusion_system(a, spacing)
    interior = conjugate_gradient(system, np.ones(system.dimension), tol=tol)
    u = np.zeros(a.shape)
    mask = index >= 0
    u[mask] = interior[index[mask]]
    return u


def gaussian_random_field(rng: np.random.Generator, shape: Sequence[int], spacing: float,
                          length_scale: float = GRF_LENGTH_SCALE) -> np.ndarray:
    """
    Гауссово поле со squared-exponential корреляцией (спектральный синтез через FFT).

    Спектральная плотность ядра exp(−r²/(2ℓ²)) пропорциональна exp(−2π²ℓ²|ν|²),
    амплитуда фильтра — её корень.
    """
    noise = rng.standard_normal(tuple(shape))
    freqs = np.meshgrid(*[fft.fftfreq(n, d=spacing) for n in shape], indexing='ij')
    nu2 = sum(f * f for f in freqs)
    amplitude = np.exp(-np.pi ** 2 * length_scale ** 2 * nu2)
    return np.real(fft.ifftn(fft.fftn(noise) * amplitude))


def darcy_coefficient(field: np.ndarray) -> np.ndarray:
    return np.where(field >= np.median(field), DARCY_HIGH, DARCY_LOW)


def _darcy_sample(seed: int, i: int, resolution: int, spacing: float, tol: float):
    rng = substream(seed, 'data', i)
    a = darcy_coefficient(gaussian_random_field(rng, (resolution, resolution), spacing))
    u = solve_diffusion(a, spacing, tol)
    return a.ravel(), u.ravel()


def _run_samples(worker, n: int, workers: int, desc: str):
    progress = tqdm(total=n, desc=desc, disable=n == 0 or not _progress_enabled(), leave=False)
    results = [None] * n
    if workers <= 1:
        for i in range(n):
            results[i] = worker(i)
            progress.update(1)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for i, res in zip(range(n), pool.map(worker, range(n))):
                results[i] = res
                progress.update(1)
    progress.close()
    return results


def _progress_enabled() -> bool:
    return os.getenv('ONO_PROGRESS', '1') != '0'


def generate_darcy2d(n: int, resolution: int, seed: int, tol: float = CG_TOL, workers: int = 1) -> Dataset:
    """
    Набор Darcy на сетке resolution × resolution.

    Args:
        n: Число пар
        resolution: Узлов по стороне (>= 8)
        seed: Корневой seed
        tol: Точность CG
        workers: Потоки генерации

    Returns:
        Dataset с f = a, u = решение
    """
    if resolution < MIN_DARCY_RESOLUTION:
        raise ValueError(f"разрешение Darcy должно быть >= {MIN_DARCY_RESOLUTION}: {resolution}")
    mesh = grid_mesh(resolution, resolution)
    spacing = mesh.grid.spacing
    logger.info("  Генерация Darcy: %d сэмплов, сетка %dx%d", n, resolution, resolution)

    samples = _run_samples(lambda i: _darcy_sample(seed, i, resolution, spacing, tol), n, workers, "Darcy")
    m = mesh.size
    f = np.array([s[0] for s in samples]).reshape(n, m, 1)
    u = np.array([s[1] for s in samples]).reshape(n, m, 1)
    provenance = {
        'generator': 'darcy2d', 'seed': int(seed), 'resolution': int(resolution), 'solver_tol': tol,
        'coefficient': f"thresholded GRF, SE length {GRF_LENGTH_SCALE}, levels {DARCY_HIGH}/{DARCY_LOW} at median",
    }
    return Dataset(mesh, f, u, provenance)


def poisson1d_solution(coeffs: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    f = Σ c_m sin(mπx), u = Σ c_m sin(mπx)/(mπ)²

    Returns:
        (f, u) в точках x
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    modes = np.arange(1, len(coeffs) + 1)
    basis = np.sin(np.pi * np.outer(x, modes))
    return basis @ coeffs, basis @ (coeffs / (modes * np.pi) ** 2)


def generate_poisson1d(n: int, resolution: int, seed: int, modes: int = POISSON_MODES) -> Dataset:
    """Набор Poisson1D с точным решением"""
    if resolution < 2:
        raise ValueError(f"разрешение Poisson1D должно быть >= 2: {resolution}")
    mesh = grid_mesh(resolution)
    x = mesh.points[:, 0]
    m = mesh.size
    f = np.zeros((n, m, 1))
    u = np.zeros((n, m, 1))
    for i in range(n):
        coeffs = substream(seed, 'data', i).standard_normal(modes)
        fi, ui = poisson1d_solution(coeffs, x)
        f[i, :, 0] = fi
        u[i, :, 0] = ui
    logger.info("  Генерация Poisson1D: %d сэмплов, %d точек", n, resolution)
    return Dataset(mesh, f, u, {'generator': 'poisson1d', 'seed': int(seed), 'resolution': int(resolution),
                                'modes': int(modes), 'solver_tol': 0.0})


GENERATORS = {
    'darcy2d': generate_darcy2d,
    'poisson1d': generate_poisson1d,
}


def generate(name: str, n: int, resolution: int, seed: int, workers: int = 1,
             tol: Optional[float] = None) -> Dataset:
    """Диспетчер генераторов по имени бенчмарка"""
    if name not in GENERATORS:
        raise ValueError(f"неизвестный бенчмарк: {name} (есть: {', '.join(GENERATORS)})")
    if name == 'darcy2d':
        return generate_darcy2d(n, resolution, seed, tol=CG_TOL if tol is None else tol, workers=workers)
    return generate_poisson1d(n, resolution, seed)
