"""
Плотные и разреженные численные ядра

- cholesky: разложение C = L Lᵀ с однократным jitter
- solve_triangular: прямая/обратная подстановка
- sym_eig: циклический метод Якоби (параллельный порядок вращений)
- conjugate_gradient: CG для разреженной SPD-системы

Все функции чистые, работают в float64 и не меняют входы.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from src.numerics.errors import NoConvergence, NotPositiveDefinite, ShapeMismatch, SingularFactor

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10
PIVOT_FLOOR = 1e-12
JITTER_SCALE = 1e-6
JACOBI_MAX_SWEEPS = 100


def as_dense(a) -> np.ndarray:
    """Приведение к DenseMatrix: двумерный float64 массив с конечными элементами"""
    m = np.array(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise ShapeMismatch("ожидалась матрица", [m.shape])
    if not np.all(np.isfinite(m)):
        raise ValueError("матрица содержит NaN/Inf")
    return m


def _check_symmetric(a: np.ndarray, what: str):
    if a.shape[0] != a.shape[1]:
        raise ShapeMismatch(f"{what}: матрица не квадратная", [a.shape])
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > SYMMETRY_TOL * scale:
        raise ValueError(f"{what}: матрица не симметрична")


def _cholesky_once(a: np.ndarray, floor: float) -> Optional[np.ndarray]:
    """Столбцовый Холецкий; None, если какой-то ведущий элемент <= floor"""
    n = a.shape[0]
    l = np.zeros_like(a)
    for j in range(n):
        pivot = a[j, j] - np.dot(l[j, :j], l[j, :j])
        if not pivot > floor:
            return None
        l[j, j] = np.sqrt(pivot)
        if j + 1 < n:
            l[j + 1:, j] = (a[j + 1:, j] - l[j + 1:, :j] @ l[j, :j]) / l[j, j]
    return l


def cholesky(c, return_jitter: bool = False):
    """
    Разложение Холецкого симметричной положительно определённой матрицы.

    Если ведущий элемент <= 1e-12 * max(diag), к диагонали один раз
    добавляется 1e-6 * mean(diag) и разложение повторяется.

    Args:
        c: Симметричная матрица k×k
        return_jitter: Вернуть также добавленный jitter

    Returns:
        Нижнетреугольная L (и jitter, если запрошен)
    """
    a = as_dense(c)
    _check_symmetric(a, "cholesky")
    n = a.shape[0]
    if n == 0:
        return (a.copy(), 0.0) if return_jitter else a.copy()

    diag = np.diag(a)
    floor = PIVOT_FLOOR * max(float(np.max(diag)), 0.0)
    l = _cholesky_once(a, floor)
    jitter = 0.0
    if l is None:
        jitter = JITTER_SCALE * float(np.mean(diag))
        if not jitter > 0:
            raise NotPositiveDefinite("неположительная диагональ, jitter невозможен")
        logger.warning("  Холецкий: вырожденный ведущий элемент, jitter %.3e", jitter)
        a = a + jitter * np.eye(n)
        l = _cholesky_once(a, floor)
        if l is None:
            raise NotPositiveDefinite("матрица не положительно определена после jitter")
    return (l, jitter) if return_jitter else l


def solve_triangular(l, b, transpose_l: bool = False) -> np.ndarray:
    """
    Решение L x = b (или Lᵀ x = b) подстановкой.

    Args:
        l: Нижнетреугольная матрица n×n
        b: Правая часть n или n×r
        transpose_l: Решать с Lᵀ (обратная подстановка)

    Returns:
        x той же формы, что и b
    """
    l = np.asarray(l, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = l.shape[0]
    if l.ndim != 2 or l.shape[1] != n or b.shape[0] != n:
        raise ShapeMismatch("solve_triangular", [l.shape, b.shape])
    d = np.diag(l)
    if np.any(d == 0):
        raise SingularFactor("нулевой диагональный элемент в треугольном факторе")

    x = np.array(b, dtype=np.float64, copy=True)
    if not transpose_l:
        for i in range(n):
            x[i] = (x[i] - l[i, :i] @ x[:i]) / d[i]
    else:
        # Lᵀ верхнетреугольная: строка i матрицы Lᵀ = столбец i матрицы L
        for i in range(n - 1, -1, -1):
            x[i] = (x[i] - l[i + 1:, i] @ x[i + 1:]) / d[i]
    return x


def _round_robin(n: int):
    """Раунды турнирного расписания: n-1 раундов попарно непересекающихся пар"""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            p, q = np.array(pairs).T
            rounds.append((p, q))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _off_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(a - np.diag(np.diag(a))))


def sym_eig(a, tol: float = 1e-14, max_sweeps: int = JACOBI_MAX_SWEEPS) -> Tuple[np.ndarray, np.ndarray]:
    """
    Собственные пары симметричной матрицы методом Якоби.

    Вращения внутри одного раунда действуют на непересекающиеся пары
    индексов, поэтому раунд применяется одной векторной операцией.

    Returns:
        (собственные значения по убыванию, ортонормированные векторы-столбцы)
    """
    a = as_dense(a)
    _check_symmetric(a, "sym_eig")
    n = a.shape[0]
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    if n <= 1:
        return np.diag(a).copy(), v

    rounds = _round_robin(n)
    total = np.linalg.norm(a)
    # Порог растёт с n: округление оставляет ~eps·‖A‖ в каждом внедиагональном элементе
    threshold = tol * total * max(1.0, np.sqrt(n))
    converged = total == 0.0
    sweep = 0
    previous_off = np.inf
    while not converged:
        if sweep >= max_sweeps:
            off = _off_norm(a)
            raise NoConvergence(f"Якоби не сошёлся за {max_sweeps} проходов", residual=off, iterations=sweep)
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) > 0
            if not np.any(active):
                continue
            app, aqq = a[p, p], a[q, q]
            safe = np.where(active, apq, 1.0)
            theta = (aqq - app) / (2.0 * safe)
            t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            # A <- Pᵀ A P, V <- V P
            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            rp, rq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * rp - s[:, None] * rq
            a[q, :] = s[:, None] * rp + c[:, None] * rq
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        sweep += 1
        off = _off_norm(a)
        # Остановка и при застое на уровне округления
        converged = off <= threshold or (off >= previous_off and off <= 1e-10 * total)
        previous_off = off

    eigenvalues = np.diag(a).copy()
    order = np.argsort(-eigenvalues, kind='stable')
    logger.debug("  Якоби: n=%d, проходов %d", n, sweep)
    return eigenvalues[order], v[:, order]


@dataclass
class SparseSystem:
    """
    Разреженная система A x = b, заданная тройками (row, col, value).

    Повторяющиеся тройки суммируются.
    """
    dimension: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    spd: bool = False
    matrix: sparse.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if not (len(self.rows) == len(self.cols) == len(self.values)):
            raise ShapeMismatch("тройки разной длины", [self.rows.shape, self.cols.shape, self.values.shape])
        if len(self.rows) and (self.rows.max() >= self.dimension or self.cols.max() >= self.dimension
                               or self.rows.min() < 0 or self.cols.min() < 0):
            raise ValueError("индекс тройки вне размерности системы")
        self.matrix = sparse.coo_matrix(
            (self.values, (self.rows, self.cols)), shape=(self.dimension, self.dimension)
        ).tocsr()
        if self.spd and self.dimension:
            asym = abs(self.matrix - self.matrix.T).max()
            if asym > SYMMETRY_TOL * max(1.0, abs(self.matrix).max()):
                raise ValueError("флаг SPD установлен, но матрица несимметрична")

    @classmethod
    def from_triplets(cls, dimension: int, triplets: Sequence[Tuple[int, int, float]], spd: bool = False):
        if len(triplets) == 0:
            return cls(dimension, np.zeros(0), np.zeros(0), np.zeros(0), spd=spd)
        r, c, v = zip(*triplets)
        return cls(dimension, np.array(r), np.array(c), np.array(v), spd=spd)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x


def conjugate_gradient(system: SparseSystem, rhs, tol: float = 1e-10, max_iter: Optional[int] = None,
                       x0: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Метод сопряжённых градиентов без предобуславливателя.

    Критерий остановки: ‖A x − b‖ / ‖b‖ <= tol.

    Args:
        system: SPD-система
        rhs: Правая часть
        tol: Относительная невязка
        max_iter: Лимит итераций (по умолчанию 10·n)

    Returns:
        Решение x
    """
    if not system.spd:
        raise ValueError("CG требует флаг SPD")
    if not tol > 0:
        raise ValueError("tol должен быть > 0")
    b = np.asarray(rhs, dtype=np.float64)
    n = system.dimension
    if b.shape != (n,):
        raise ShapeMismatch("правая часть CG", [b.shape, (n,)])
    if max_iter is None:
        max_iter = max(10 * n, 100)

    b_norm = np.linalg.norm(b)
    if b_norm == 0:
        return np.zeros(n)

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - system.matvec(x)
    d = r.copy()
    rr = r @ r
    for it in range(max_iter + 1):
        if np.sqrt(rr) / b_norm <= tol:
            # Контроль по истинной невязке, а не по рекуррентной
            true_res = np.linalg.norm(b - system.matvec(x)) / b_norm
            if true_res <= tol:
                logger.debug("  CG: %d итераций, невязка %.2e", it, true_res)
                return x
            r = b - system.matvec(x)
            d = r.copy()
            rr = r @ r
        if it == max_iter:
            break
        ad = system.matvec(d)
        alpha = rr / (d @ ad)
        x = x + alpha * d
        r = r - alpha * ad
        rr_new = r @ r
        d = r + (rr_new / rr) * d
        rr = rr_new

    residual = float(np.linalg.norm(b - system.matvec(x)) / b_norm)
    raise NoConvergence(f"CG не сошёлся за {max_iter} итераций, невязка {residual:.3e}",
                        residual=residual, iterations=max_iter)
