"""
Обратное автодифференцирование на numpy

Операции, выполненные внутри `with Tape():`, записываются на ленту, если
хотя бы один вход требует градиента. Вне ленты те же функции просто
считают значения (eval-режим без накладных расходов).

    with Tape():
        loss = ops.sum(ops.square(w @ x))
        grads = backward(loss)
"""

import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from src.numerics import linalg
from src.numerics.errors import NotScalarLoss, ShapeMismatch, TapeReused

_local = threading.local()

LAYER_NORM_DEGENERATE = 1e-12


def _tape_stack() -> List['Tape']:
    if not hasattr(_local, 'stack'):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional['Tape']:
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class Node:
    """Запись операции на ленте"""
    index: int
    kind: str
    inputs: Tuple['Tensor', ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """
    Лента операций одного прямого прохода.

    Узлы упорядочены топологически (входы раньше выходов).
    Допускается ровно один backward().
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.leaves: Dict[int, 'Tensor'] = {}
        self.consumed = False

    def __enter__(self) -> 'Tape':
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False


class Tensor:
    """Плотный float64 массив с опциональным участием в ленте"""

    __array_priority__ = 100

    def __init__(self, data, grad_required: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad_required = grad_required
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.tape: Optional[Tape] = None
        self.node: Optional[int] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ''
        return f"Tensor{tag}(shape={self.shape}, grad_required={self.grad_required})"

    # Операторы
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, index): return slice_(self, index)

    @property
    def T(self) -> 'Tensor':
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Свернуть градиент к форме входа после broadcasting"""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _record(kind: str, value: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(value)
    tape = active_tape()
    if tape is None:
        return out
    tracked = [t for t in inputs if (t.tape is tape and t.node is not None) or t.grad_required]
    if not tracked:
        return out
    if tape.consumed:
        raise TapeReused("лента уже использована в backward()")
    for t in inputs:
        if t.grad_required and t.node is None and id(t) not in tape.leaves:
            tape.leaves[id(t)] = t
            t.grad = None
    node = Node(len(tape.nodes), kind, tuple(inputs), backward_fn)
    tape.nodes.append(node)
    out.tape = tape
    out.node = node.index
    return out


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """
    Обратный проход по ленте, породившей loss.

    Returns:
        Словарь {лист: градиент} для всех листьев ленты с grad_required
    """
    if loss.size != 1:
        raise NotScalarLoss(f"backward() ожидает скаляр, получена форма {loss.shape}")
    tape = loss.tape
    if tape is None:
        return {}
    if tape.consumed:
        raise TapeReused("повторный backward() по той же ленте")
    tape.consumed = True

    grads: Dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for node in reversed(tape.nodes[:loss.node + 1]):
        g = grads.pop(node.index, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None:
                continue
            gi = _unbroadcast(np.asarray(gi, dtype=np.float64), inp.shape)
            if inp.tape is tape and inp.node is not None:
                prev = grads.get(inp.node)
                grads[inp.node] = gi if prev is None else prev + gi
            elif inp.grad_required:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi

    for leaf in tape.leaves.values():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    return {leaf: leaf.grad for leaf in tape.leaves.values()}


# ============ Поэлементные операции ============

def _broadcast_check(kind: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(kind, [a.shape, b.shape]) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check('add', a, b)
    return _record('add', a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check('sub', a, b)
    return _record('sub', a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record('neg', -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check('mul', a, b)
    return _record('mul', a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check('div', a, b)
    out = a.data / b.data
    return _record('div', out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record('scale', a.data * c, (a,), lambda g: (g * c,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record('square', a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    positive = out > 0
    # в нуле производная обнуляется
    return _record('sqrt', out, (a,),
                   lambda g: (np.divide(0.5 * g, out, out=np.zeros_like(out), where=positive),))


def exp(a) -> Tensor:
    """exp: положительная параметризация собственных значений μ̂ = exp(raw)"""
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record('exp', out, (a,), lambda g: (g * out,))


def gelu(a) -> Tensor:
    """Точная GELU: x·Φ(x)"""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return _record('gelu', x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def elu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    ex = np.exp(np.minimum(x, 0.0))
    out = np.where(x > 0, x, ex - 1.0)
    return _record('elu', out, (a,), lambda g: (g * np.where(x > 0, 1.0, ex),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record('tanh', out, (a,), lambda g: (g * (1.0 - out * out),))


# ============ Редукции и формы ============

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def _back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _record('sum', out, (a,), _back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record('reshape', a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    """Перестановка двух последних осей"""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeMismatch("transpose требует ndim >= 2", [a.shape])
    return _record('transpose', np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def slice_(a, index) -> Tensor:
    a = as_tensor(a)

    def _back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record('slice', a.data[index], (a,), _back)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat", [t.shape for t in tensors]) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record('concat', out, tuple(tensors), _back)


# ============ Линейная алгебра ============

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch('matmul', [a.shape, b.shape])
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatch('matmul', [a.shape, b.shape]) from None

    def _back(g):
        return (np.matmul(g, np.swapaxes(b.data, -1, -2)),
                np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _record('matmul', out, (a, b), _back)


def layer_norm(a) -> Tensor:
    """
    Нормализация по последней оси без аффинной части.

    Строки с дисперсией < 1e-12 дают нули (и нулевой градиент).
    """
    a = as_tensor(a)
    if a.ndim < 1 or a.shape[-1] < 1:
        raise ShapeMismatch("layer_norm: пустая ось признаков", [a.shape])
    x = a.data
    centered = x - x.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    ok = var >= LAYER_NORM_DEGENERATE
    inv = np.where(ok, 1.0 / np.sqrt(np.where(ok, var, 1.0)), 0.0)
    y = centered * inv

    def _back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _record('layer_norm', y, (a,), _back)


def cholesky(a) -> Tensor:
    """Дифференцируемый Холецкий (2D); jitter, если был, считается константой"""
    a = as_tensor(a)
    l = linalg.cholesky(a.data)

    def _back(g):
        p = np.tril(l.T @ np.tril(g))
        p = 0.5 * (p + np.tril(p, -1).T)
        x = linalg.solve_triangular(l, p, transpose_l=True)
        ga = linalg.solve_triangular(l, x.T, transpose_l=True).T
        return (0.5 * (ga + ga.T),)

    return _record('cholesky', l, (a,), _back)


def solve_lower_t(x, l) -> Tensor:
    """
    Правое умножение на L^{-T}: y = x L^{-T} через треугольные решения.

    Args:
        x: (..., k)
        l: Нижнетреугольная k×k
    """
    x, l = as_tensor(x), as_tensor(l)
    k = l.shape[0]
    if l.ndim != 2 or l.shape[1] != k or x.shape[-1] != k:
        raise ShapeMismatch('solve_lower_t', [x.shape, l.shape])
    flat = x.data.reshape(-1, k)
    y = linalg.solve_triangular(l.data, flat.T).T

    def _back(g):
        gflat = g.reshape(-1, k)
        gx = linalg.solve_triangular(l.data, gflat.T, transpose_l=True).T
        gl = -np.tril(gx.T @ y)
        return (gx.reshape(x.shape), gl)

    return _record('solve_lower_t', y.reshape(x.shape), (x, l), _back)


# ============ Проверка градиентов ============

def grad_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """
    Сравнение аналитического градиента с центральными разностями.

    Returns:
        max |a − n| / (|a| + |n| + 1e-12) по всем координатам
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps вне диапазона [1e-7, 1e-3]: {eps}")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)

    with Tape():
        x = Tensor(x0.copy(), grad_required=True)
        backward(f(x))
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    for i in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        numeric.flat[i] = (float(f(Tensor(xp)).data) - float(f(Tensor(xm)).data)) / (2.0 * eps)

    return _max_relative_error(analytic, numeric)


def grad_check_parameters(loss_fn: Callable[[], Tensor], parameters: Dict[str, Tensor], eps: float = 1e-5,
                          max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """
    grad_check по набору именованных параметров.

    Args:
        loss_fn: Без аргументов, читает параметры по ссылке
        parameters: {имя: Tensor с grad_required}
        max_coords: Случайная подвыборка координат каждого параметра

    Returns:
        Максимальная относительная ошибка
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps вне диапазона [1e-7, 1e-3]: {eps}")
    with Tape():
        backward(loss_fn())

    worst = 0.0
    for name, p in parameters.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        coords = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(p.size, size=max_coords, replace=False)
        for i in coords:
            saved = p.data.flat[i]
            p.data.flat[i] = saved + eps
            fp = float(loss_fn().data)
            p.data.flat[i] = saved - eps
            fm = float(loss_fn().data)
            p.data.flat[i] = saved
            numeric = (fp - fm) / (2.0 * eps)
            worst = max(worst, _max_relative_error(np.array([analytic.flat[i]]), np.array([numeric])))
    return worst


def _max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(np.max(err))
