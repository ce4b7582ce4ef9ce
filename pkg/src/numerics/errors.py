"""
Исключения тулкита

Все ошибки наследуются от OnoError, чтобы app.py ловил их одним except.
"""

from typing import Optional, Sequence, Tuple


class OnoError(Exception):
    """Базовая ошибка"""


class ConfigError(OnoError):
    """Неверный или неизвестный ключ конфигурации"""


# ============ Линейная алгебра ============

class NotPositiveDefinite(OnoError):
    """Матрица не положительно определена даже после добавления jitter"""


class SingularFactor(OnoError):
    """Нулевой элемент на диагонали треугольного фактора"""


class NoConvergence(OnoError):
    """Итерационный метод не сошёлся за отведённое число итераций"""

    def __init__(self, message: str, residual: Optional[float] = None, iterations: int = 0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


# ============ Автодифференцирование ============

class ShapeMismatch(OnoError):
    """Несовместимые формы операндов"""

    def __init__(self, message: str, shapes: Sequence[Tuple[int, ...]] = ()):
        shapes = tuple(tuple(s) for s in shapes)
        if shapes:
            message = f"{message}: {' vs '.join(str(s) for s in shapes)}"
        super().__init__(message)
        self.shapes = shapes


class NotScalarLoss(OnoError):
    """backward() вызван не для скаляра"""


class TapeReused(OnoError):
    """Повторный backward() по уже использованной ленте"""


# ============ Модель ============

class MeshTooSmall(OnoError):
    """Сетка меньше k точек в режиме обучения"""


class BufferNotInitialized(OnoError):
    """Eval-режим с неинициализированным буфером ковариации"""


# ============ Данные ============

class NotAGrid(OnoError):
    """У сетки нет метаданных регулярной решётки"""


class IncompatibleFactor(OnoError):
    """Шаг прореживания не делит (nx - 1)"""


class DatasetFormatError(OnoError):
    """Повреждённый или несовместимый бинарный файл"""


class BadMagic(DatasetFormatError):
    pass


class VersionUnsupported(DatasetFormatError):
    pass


class TruncatedFile(DatasetFormatError):
    pass


class ChecksumMismatch(DatasetFormatError):
    pass


class CorruptFile(DatasetFormatError):
    """Структура файла не соответствует формату: лишние байты, неизвестные имена"""


# ============ Обучение ============

class ZeroTarget(OnoError):
    """Норма целевого решения почти нулевая"""


class NonFiniteGradient(OnoError):
    """В градиенте NaN или Inf"""


class StepOutOfRange(OnoError):
    """Шаг расписания вне [0, total_steps]"""
