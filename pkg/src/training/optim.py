"""
AdamW и one-cycle расписание скорости обучения
"""

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Optional, Tuple

import numpy as np

from src.numerics.autodiff import Tensor
from src.numerics.errors import ConfigError, NonFiniteGradient, StepOutOfRange

logger = logging.getLogger(__name__)

NO_DECAY_SUFFIXES = ('raw_mu', '.gamma', '.beta')


@dataclass
class ScheduleConfig:
    max_lr: float = 1e-3
    total_steps: int = 1
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    def validate(self) -> 'ScheduleConfig':
        if not 0.0 < self.pct_start < 1.0:
            raise ConfigError(f"pct_start вне (0, 1): {self.pct_start}")
        if not self.max_lr > 0:
            raise ConfigError(f"max_lr должен быть > 0: {self.max_lr}")
        if self.total_steps < 0:
            raise ConfigError(f"total_steps < 0: {self.total_steps}")
        if self.div_factor <= 0 or self.final_div_factor <= 0:
            raise ConfigError("div_factor и final_div_factor должны быть > 0")
        return self

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'ScheduleConfig':
        unknown = sorted(set(data) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"неизвестные ключи ScheduleConfig: {', '.join(unknown)}")
        return cls(**data).validate()


def _cosine(start: float, end: float, frac: float) -> float:
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def onecycle_lr(cfg: ScheduleConfig, step: int) -> float:
    """
    Скорость обучения на шаге step.

    Косинусный подъём max_lr/div_factor → max_lr за pct_start·total_steps,
    затем косинусный спуск к max_lr/final_div_factor.
    """
    if step < 0 or step > cfg.total_steps:
        raise StepOutOfRange(f"шаг {step} вне [0, {cfg.total_steps}]")
    initial = cfg.max_lr / cfg.div_factor
    final = cfg.max_lr / cfg.final_div_factor
    if cfg.total_steps == 0:
        return initial
    warm = cfg.pct_start * cfg.total_steps
    if step <= warm:
        return _cosine(initial, cfg.max_lr, step / warm)
    return _cosine(cfg.max_lr, final, (step - warm) / (cfg.total_steps - warm))


@dataclass
class TrainState:
    """
    Состояние обучения.

    step считает применённые шаги (для коррекции смещения моментов),
    schedule_step считает все батчи, включая пропущенные.
    """
    parameters: Dict[str, Tensor]
    model: Optional[object] = None
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    schedule_step: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    best_val: float = math.inf
    rng_state: Optional[Dict] = None
    skipped_steps: int = 0

    def __post_init__(self):
        for name, p in self.parameters.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))

    @classmethod
    def create(cls, model, schedule: Optional[ScheduleConfig] = None) -> 'TrainState':
        return cls(parameters=model.parameters(), model=model, schedule=schedule or ScheduleConfig())


def decays(name: str) -> bool:
    """raw_mu и параметры LayerNorm не затухают"""
    return not name.endswith(NO_DECAY_SUFFIXES)


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """Масштабирование всех градиентов, если глобальная норма > max_norm"""
    norm = global_norm(grads)
    if not np.isfinite(norm) or norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}, norm


def adamw_step(state: TrainState, grads: Dict[str, np.ndarray], lr: float,
               betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 1e-4) -> TrainState:
    """
    Один шаг AdamW с развязанным weight decay.

    θ ← θ − lr·wd·θ, затем θ ← θ − lr·m̂/(√v̂ + eps).

    Raises:
        NonFiniteGradient: градиент с NaN/Inf; состояние не меняется
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"NaN/Inf в градиенте {name}")

    beta1, beta2 = betas
    t = state.step + 1
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for name, p in state.parameters.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if weight_decay and decays(name):
            p.data -= lr * weight_decay * p.data
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        p.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    state.step = t
    return state
