"""
Численная проверка спектральной теории ортогонального внимания

- spectral_truth: эталонный спектр ядра на сетке через sym_eig
- mercer_truncation_error: HS-ошибка ранга k по спектру и по Фробениусу
- appendix_loss_direct / appendix_loss_closed: целевая функция в координатах
- recover_eigenfunctions: обучение MLP-собственных функций с Холецкий-отбеливанием
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import linalg as sp_linalg
from tqdm import tqdm

from src.model.nn_blocks import Dense, prefixed_parameters
from src.numerics import autodiff as ops
from src.numerics import linalg
from src.numerics.autodiff import Tape, Tensor
from src.numerics.errors import ShapeMismatch
from src.numerics.seeding import substream
from src.training.optim import ScheduleConfig, TrainState, adamw_step, onecycle_lr

logger = logging.getLogger(__name__)

KERNELS = ('min', 'rbf')
ORTHONORMAL_TOL = 1e-8
REPORT_COLUMNS = ['kernel', 'k', 'i', 'eigenvalue_true', 'eigenvalue_learned', 'alignment']


@dataclass(frozen=True)
class AnalyticKernel:
    """Ядро на [0, 1]: min(x, x′) или exp(−(x − x′)²/(2ℓ²))"""
    name: str = 'min'
    length_scale: float = 0.1

    def __post_init__(self):
        if self.name not in KERNELS:
            raise ValueError(f"неизвестное ядро: {self.name} (есть: {', '.join(KERNELS)})")
        if self.length_scale <= 0:
            raise ValueError(f"length_scale должен быть > 0: {self.length_scale}")

    def matrix(self, x: np.ndarray, y: Optional[np.ndarray] = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).ravel()
        y = x if y is None else np.asarray(y, dtype=np.float64).ravel()
        if self.name == 'min':
            return np.minimum(x[:, None], y[None, :])
        return np.exp(-(x[:, None] - y[None, :]) ** 2 / (2.0 * self.length_scale ** 2))


def min_kernel_eigenvalue(j: int) -> float:
    """μ_j = 1/((j − ½)²π²), j с единицы"""
    return 1.0 / ((j - 0.5) ** 2 * np.pi ** 2)


def min_kernel_eigenfunction(j: int, x: np.ndarray) -> np.ndarray:
    return np.sqrt(2.0) * np.sin((j - 0.5) * np.pi * np.asarray(x, dtype=np.float64))


def midpoint_grid(m: int) -> np.ndarray:
    return (np.arange(m) + 0.5) / m


@dataclass
class SpectralTruth:
    """
    Дискретный спектр оператора K/M.

    eigenfunctions — первые k столбцов basis; все столбцы ортонормированы
    в скалярном произведении (1/M)·uᵀv.
    """
    grid: np.ndarray
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    operator: np.ndarray
    basis: np.ndarray

    @property
    def m(self) -> int:
        return len(self.grid)

    @property
    def k(self) -> int:
        return self.eigenfunctions.shape[1]


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Первый заметный элемент каждого столбца положителен"""
    out = vectors.copy()
    for i in range(out.shape[1]):
        col = out[:, i]
        significant = np.flatnonzero(np.abs(col) > 1e-8 * np.max(np.abs(col)))
        if len(significant) and col[significant[0]] < 0:
            out[:, i] = -col
    return out


def spectral_truth(kernel: AnalyticKernel, grid_size: int, k: int) -> SpectralTruth:
    """
    Собственные пары K/M на сетке средних точек.

    Args:
        kernel: Ядро
        grid_size: M (>= 4k)
        k: Число возвращаемых собственных функций
    """
    if grid_size < 4 * k:
        raise ValueError(f"сетка {grid_size} меньше 4k = {4 * k}")
    x = midpoint_grid(grid_size)
    operator = kernel.matrix(x) / grid_size
    values, vectors = linalg.sym_eig(operator)
    basis = _fix_signs(np.sqrt(grid_size) * vectors)
    logger.debug("  Спектр %s: M=%d, μ₁=%.4e", kernel.name, grid_size, values[0])
    return SpectralTruth(x, values, basis[:, :k], operator, basis)


def mercer_truncation_error(truth: SpectralTruth, k: int) -> float:
    """√(Σ_{i>k} μ_i²): HS-норма отброшенной части спектра"""
    if not 0 <= k <= truth.m:
        raise ValueError(f"k вне [0, {truth.m}]: {k}")
    tail = truth.eigenvalues[k:]
    return float(np.sqrt(np.sum(tail * tail)))


def frobenius_truncation_error(truth: SpectralTruth, k: int) -> float:
    """‖K/M − ψ_{:k} diag(μ_{:k}) ψ_{:k}ᵀ / M‖_F напрямую по матрицам"""
    if not 0 <= k <= truth.m:
        raise ValueError(f"k вне [0, {truth.m}]: {k}")
    psi = truth.basis[:, :k]
    approx = (psi * truth.eigenvalues[:k]) @ psi.T / truth.m
    return float(np.linalg.norm(truth.operator - approx))


# ============ Целевая функция в координатах ============

@dataclass
class CoordinateProblem:
    """
    Конечномерный аналог: истинные собственные функции — базис e_j,
    кандидаты ψ̂_i — строки a, f имеет второй момент A_f.
    """
    a: np.ndarray
    a_f: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        self.a = np.atleast_2d(np.asarray(self.a, dtype=np.float64))
        self.a_f = np.asarray(self.a_f, dtype=np.float64)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        n = self.a.shape[1]
        if self.a_f.shape != (n, n) or self.mu.shape != (n,):
            raise ShapeMismatch("CoordinateProblem", [self.a.shape, self.a_f.shape, self.mu.shape])
        gram = self.a @ self.a.T
        if np.max(np.abs(gram - np.eye(self.a.shape[0]))) > ORTHONORMAL_TOL:
            raise ValueError("строки a не ортонормированы")

    @property
    def n(self) -> int:
        return self.a.shape[1]

    @property
    def k(self) -> int:
        return self.a.shape[0]


def appendix_loss_closed(prob: CoordinateProblem) -> float:
    """Σ_i a_iᵀ [A_f − A_f diag(μ) − diag(μ) A_f] a_i"""
    d = np.diag(prob.mu)
    middle = prob.a_f - prob.a_f @ d - d @ prob.a_f
    return float(np.trace(prob.a @ middle @ prob.a.T))


def appendix_loss_terms(prob: CoordinateProblem, samples: np.ndarray) -> np.ndarray:
    """
    Значение под ожиданием для каждого сэмпла координат f.

    Σ_i⟨ψ̂_i,f⟩² − 2Σ_i⟨ψ̂_i,f⟩ Σ_j μ_j⟨ψ_j,f⟩⟨ψ̂_i,ψ_j⟩
    """
    c = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if c.shape[1] != prob.n:
        raise ShapeMismatch("appendix_loss_terms", [c.shape, (prob.n,)])
    proj = c @ prob.a.T                      # ⟨ψ̂_i, f⟩
    operator = (c * prob.mu) @ prob.a.T      # Σ_j μ_j ⟨ψ_j, f⟩ a_ij
    return np.sum(proj * proj, axis=1) - 2.0 * np.sum(proj * operator, axis=1)


def appendix_loss_direct(prob: CoordinateProblem, samples: np.ndarray) -> float:
    """Монте-Карло оценка целевой функции (без константы, не зависящей от a)"""
    return float(np.mean(appendix_loss_terms(prob, samples)))


def sample_coordinates(a_f: np.ndarray, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Сэмплы c с E[c cᵀ] = A_f через симметричный корень из sym_eig"""
    values, vectors = linalg.sym_eig(a_f)
    root = (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T
    return rng.standard_normal((n_samples, a_f.shape[0])) @ root


def random_problem(rng: np.random.Generator, n: int, k: int) -> CoordinateProblem:
    """Случайная задача: ортонормированные строки a, SPSD A_f, положительные μ"""
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    b = rng.standard_normal((n, n))
    return CoordinateProblem(q[:k], b @ b.T / n, np.sort(rng.uniform(0.05, 1.0, n))[::-1])


# ============ Восстановление собственных функций ============

class EigenMlp:
    """ψ̂: [0, 1] → ℝᵏ, два скрытых слоя tanh, вход 2x − 1"""

    def __init__(self, rng: np.random.Generator, width: int, k: int):
        self.hidden1 = Dense(rng, 1, width)
        self.hidden2 = Dense(rng, width, width)
        self.out = Dense(rng, width, k)
        # Масштаб 1/√fan_in и случайные сдвиги скрытых слоёв
        for layer in (self.hidden1, self.hidden2, self.out):
            layer.weight.data[...] = rng.normal(0.0, 1.0 / np.sqrt(layer.weight.shape[0]), layer.weight.shape)
        for layer in (self.hidden1, self.hidden2):
            layer.bias.data[...] = rng.uniform(-1.0, 1.0, layer.bias.shape)
        self.raw_mu = Tensor(np.zeros(k), grad_required=True)

    def parameters(self) -> Dict[str, Tensor]:
        params = prefixed_parameters({'hidden1': self.hidden1, 'hidden2': self.hidden2, 'out': self.out})
        params['raw_mu'] = self.raw_mu
        return params

    def __call__(self, x: np.ndarray) -> Tensor:
        z = Tensor((2.0 * np.asarray(x, dtype=np.float64) - 1.0).reshape(-1, 1))
        return self.out(ops.tanh(self.hidden2(ops.tanh(self.hidden1(z)))))


def whitened_eigenmaps(mlp: EigenMlp, x: np.ndarray) -> Tensor:
    """ψ̂ = G·L^{-T}, C = GᵀG/M, по всей сетке, дифференцируемо"""
    g = mlp(x)
    cov = ops.scale(ops.matmul(ops.transpose(g), g), 1.0 / g.shape[0])
    return ops.solve_lower_t(g, ops.cholesky(cov))


def hilbert_schmidt_loss(psi: Tensor, mu: Tensor, operator: np.ndarray) -> Tensor:
    """
    E_f‖Σ μ̂_i ψ̂_i⟨ψ̂_i, f⟩ − 𝒦f‖² для белого f без константы ‖𝒦‖²_HS:
    Σ μ̂_i² − 2 Σ μ̂_i ⟨ψ̂_i, 𝒦ψ̂_i⟩
    """
    m = psi.shape[0]
    rayleigh = ops.scale(ops.sum(psi * ops.matmul(Tensor(operator), psi), axis=0), 1.0 / m)
    return ops.sum(ops.square(mu)) - ops.scale(ops.sum(mu * rayleigh), 2.0)


def monte_carlo_loss(psi: Tensor, mu: Tensor, operator: np.ndarray, rng: np.random.Generator,
                     n_samples: int) -> Tensor:
    """Та же цель по n_samples белым функциям f = √M·z"""
    m = psi.shape[0]
    f = np.sqrt(m) * rng.standard_normal((m, n_samples))
    target = operator @ f
    coeff = ops.scale(ops.matmul(ops.transpose(psi), Tensor(f)), 1.0 / m)          # (k, S)
    approx = ops.matmul(psi, coeff * ops.reshape(mu, (-1, 1)))                       # (M, S)
    return ops.scale(ops.sum(ops.square(approx - target)), 1.0 / (m * n_samples))


def greedy_alignment(learned: np.ndarray, truth: np.ndarray) -> List[Tuple[int, float]]:
    """
    Сопоставление столбцов по максимуму |cos| (жадно).

    Returns:
        Для каждого столбца truth: (индекс столбца learned, |cos|)
    """
    a = learned / np.linalg.norm(learned, axis=0, keepdims=True)
    b = truth / np.linalg.norm(truth, axis=0, keepdims=True)
    cos = np.abs(a.T @ b)
    result: List[Optional[Tuple[int, float]]] = [None] * truth.shape[1]
    for _ in range(min(cos.shape)):
        i, j = np.unravel_index(np.argmax(cos), cos.shape)
        result[j] = (int(i), float(cos[i, j]))
        cos[i, :] = -1.0
        cos[:, j] = -1.0
    return result


def principal_angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Главные углы между span(a) и span(b), в градусах по убыванию"""
    return np.degrees(sp_linalg.subspace_angles(a, b))


@dataclass
class RecoveryReport:
    kernel: str
    k: int
    eigenvalues_true: np.ndarray
    eigenvalues_learned: np.ndarray
    alignment: np.ndarray
    psi: np.ndarray
    truth: SpectralTruth
    losses: List[float] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'kernel': self.kernel,
            'k': self.k,
            'i': np.arange(1, self.k + 1),
            'eigenvalue_true': self.eigenvalues_true,
            'eigenvalue_learned': self.eigenvalues_learned,
            'alignment': self.alignment,
        }, columns=REPORT_COLUMNS)


def recover_eigenfunctions(kernel: AnalyticKernel, model_width: int, k: int, steps: int, seed: int,
                           grid_size: int = 256, samples_per_step: int = 0, max_lr: float = 1e-2) -> RecoveryReport:
    """
    Обучение ψ̂ и μ̂ минимизацией проекционной ошибки против 𝒦f.

    Args:
        kernel: Ядро
        model_width: Ширина скрытых слоёв MLP
        k: Число собственных функций
        steps: Шаги AdamW
        seed: Корневой seed (подпоток 'eigen')
        grid_size: M
        samples_per_step: 0 — точное ожидание по белому f, иначе число сэмплов

    Returns:
        RecoveryReport с выравниванием по индексам
    """
    truth = spectral_truth(kernel, grid_size, k)
    rng = substream(seed, 'eigen')
    mlp = EigenMlp(rng, model_width, k)
    params = mlp.parameters()
    schedule = ScheduleConfig(max_lr=max_lr, total_steps=steps).validate()
    state = TrainState(parameters=params, schedule=schedule)
    losses = []

    logger.info("  Восстановление: ядро %s, k=%d, M=%d, %d шагов", kernel.name, k, grid_size, steps)
    for step in tqdm(range(steps), desc="Собственные функции", leave=False,
                     disable=os.getenv('ONO_PROGRESS', '1') == '0'):
        with Tape():
            psi = whitened_eigenmaps(mlp, truth.grid)
            mu = ops.exp(mlp.raw_mu)
            if samples_per_step > 0:
                loss = monte_carlo_loss(psi, mu, truth.operator, rng, samples_per_step)
            else:
                loss = hilbert_schmidt_loss(psi, mu, truth.operator)
            ops.backward(loss)
        grads = {name: p.grad for name, p in params.items()}
        adamw_step(state, grads, onecycle_lr(schedule, step), weight_decay=0.0)
        losses.append(float(loss.data))

    psi = whitened_eigenmaps(mlp, truth.grid).data
    learned_mu = np.exp(mlp.raw_mu.data)
    matches = greedy_alignment(psi, truth.eigenfunctions)
    order = np.array([i for i, _ in matches])
    report = RecoveryReport(
        kernel=kernel.name, k=k,
        eigenvalues_true=truth.eigenvalues[:k].copy(),
        eigenvalues_learned=learned_mu[order],
        alignment=np.array([a for _, a in matches]),
        psi=psi[:, order] * np.sign(np.sum(psi[:, order] * truth.eigenfunctions, axis=0)),
        truth=truth,
        losses=losses,
    )
    logger.info("  Выравнивание: %s", ", ".join(f"{a:.4f}" for a in report.alignment))
    return report
