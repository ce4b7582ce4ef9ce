"""
Циклы обучения и оценки
"""

import logging
import math
import os
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.data.dataset_io import ChannelNormalizer, Dataset
from src.data.mesh import model_inputs, resample, restrict_mesh, restriction_indices
from src.model.ono import OnoModel, forward_query
from src.numerics import autodiff as ops
from src.numerics.autodiff import Tape, Tensor
from src.numerics.errors import ConfigError, NonFiniteGradient, ShapeMismatch
from src.numerics.seeding import substream
from src.training.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from src.training.objective import relative_l2_loss, relative_l2_per_sample
from src.training.optim import ScheduleConfig, TrainState, adamw_step, clip_by_global_norm, onecycle_lr

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ['epoch', 'step', 'lr', 'train_rel_l2', 'val_rel_l2', 'wall_ms']
SUPERRES_MODES = ('direct', 'query')


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    max_lr: float = 1e-3
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    resume_from: Optional[str] = None

    def validate(self) -> 'TrainConfig':
        if self.epochs < 0:
            raise ConfigError(f"epochs < 0: {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size < 1: {self.batch_size}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm должен быть > 0: {self.clip_norm}")
        return self

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'TrainConfig':
        unknown = sorted(set(data) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"неизвестные ключи TrainConfig: {', '.join(unknown)}")
        return cls(**data).validate()

    def schedule(self, total_steps: int) -> ScheduleConfig:
        return ScheduleConfig(self.max_lr, total_steps, self.pct_start, self.div_factor,
                              self.final_div_factor).validate()


@dataclass
class EvalResult:
    mean_rel_l2: float
    median_rel_l2: float
    per_sample: pd.DataFrame


def _progress_enabled() -> bool:
    return os.getenv('ONO_PROGRESS', '1') != '0'


def batch_arrays(dataset: Dataset, normalizer: ChannelNormalizer, indices: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(вход модели с нормализованным f, сырой u) для индексов батча"""
    f = normalizer.encode_f(dataset.f[indices])
    return model_inputs(dataset.mesh, f), dataset.u[indices]


def decode_prediction(pred: Tensor, normalizer: ChannelNormalizer) -> Tensor:
    """Выход модели живёт в нормализованных единицах u"""
    return pred * normalizer.u_std + normalizer.u_mean


def write_metrics(rows: List[Dict], path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=METRIC_COLUMNS).to_csv(path, index=False)


def read_metrics(path: Union[str, Path], epochs_done: int) -> List[Dict]:
    """Строки прежнего CSV метрик до epochs_done включительно"""
    path = Path(path)
    if not path.exists():
        return []
    frame = pd.read_csv(path, float_precision='round_trip')
    return frame[frame['epoch'] <= epochs_done].to_dict('records')


def restore_training(model: OnoModel, state: TrainState, rng: np.random.Generator, ckpt: Checkpoint,
                     steps_per_epoch: int) -> int:
    """
    Перенос состояния из чекпоинта в модель, TrainState и генератор порядка батчей.

    Returns:
        Число завершённых эпох
    """
    if ckpt.model.config != model.config:
        raise ConfigError("конфигурация модели в чекпоинте не совпадает с текущей")
    if ckpt.state is None or ckpt.state.rng_state is None:
        raise ConfigError("в чекпоинте нет состояния обучения для продолжения")
    if ckpt.state.schedule != state.schedule:
        raise ConfigError(f"расписание чекпоинта {ckpt.state.schedule} не совпадает с {state.schedule}")
    if ckpt.state.schedule_step % steps_per_epoch:
        raise ConfigError(f"чекпоинт сохранён не на границе эпохи (шаг {ckpt.state.schedule_step})")

    saved = ckpt.model.parameters()
    for name, p in model.parameters().items():
        p.data[...] = saved[name].data
    saved_buffers = ckpt.model.buffers()
    for name, buf in model.buffers().items():
        src = saved_buffers[name]
        buf.c, buf.chol = src.c.copy(), src.chol.copy()
        buf.momentum, buf.jitter, buf.initialized = src.momentum, src.jitter, src.initialized

    state.m = {name: a.copy() for name, a in ckpt.state.m.items()}
    state.v = {name: a.copy() for name, a in ckpt.state.v.items()}
    state.step = ckpt.state.step
    state.schedule_step = ckpt.state.schedule_step
    state.skipped_steps = ckpt.state.skipped_steps
    state.best_val = ckpt.state.best_val
    state.rng_state = ckpt.state.rng_state
    rng.bit_generator.state = ckpt.state.rng_state
    return ckpt.state.schedule_step // steps_per_epoch


def train(model: OnoModel, train_set: Dataset, val_set: Optional[Dataset], config: TrainConfig,
          normalizer: Optional[ChannelNormalizer] = None, metrics_path: Optional[Union[str, Path]] = None,
          checkpoint_path: Optional[Union[str, Path]] = None,
          extras: Optional[Dict] = None, last_checkpoint_path: Optional[Union[str, Path]] = None,
          stop_epoch: Optional[int] = None) -> Tuple[TrainState, List[Dict]]:
    """
    Обучение модели на train_set.

    Каждый батч: train-проход (буферы обновляются до ортонормализации),
    относительная L2 в исходных единицах, обратный проход, клиппинг, AdamW.
    При config.resume_from обучение продолжается с эпохи, записанной в чекпоинте:
    параметры, буферы, моменты, счётчики шагов и генератор порядка батчей
    восстанавливаются, так что 2 + 2 эпохи совпадают с 4 подряд.

    Args:
        model: Модель
        train_set: Обучающий набор
        val_set: Валидационный набор (может быть пустым)
        config: Параметры обучения
        normalizer: Нормализация; по умолчанию из чекпоинта продолжения или по train_set
        metrics_path: CSV метрик по эпохам
        checkpoint_path: Куда сохранять лучшее по валидации состояние
        extras: Доп. метаданные чекпоинта
        last_checkpoint_path: Куда сохранять состояние после каждой эпохи
        stop_epoch: Остановиться после этой эпохи (расписание по-прежнему на config.epochs)

    Returns:
        (состояние, журнал метрик)
    """
    config.validate()
    if train_set.n == 0:
        raise ValueError("обучающий набор пуст")
    if stop_epoch is not None and stop_epoch < 0:
        raise ConfigError(f"stop_epoch < 0: {stop_epoch}")
    steps_per_epoch = math.ceil(train_set.n / config.batch_size)
    schedule = config.schedule(config.epochs * steps_per_epoch)
    state = TrainState.create(model, schedule)
    rng = substream(config.seed, 'batch-order')

    # Шаг 1: продолжение прерванного обучения
    done = 0
    if config.resume_from:
        resumed = load_checkpoint(config.resume_from)
        done = restore_training(model, state, rng, resumed, steps_per_epoch)
        normalizer = normalizer or resumed.normalizer
        logger.info("  Продолжение с эпохи %d из %s", done, config.resume_from)
    normalizer = normalizer or ChannelNormalizer.fit(train_set)

    meta = dict(extras or {})
    meta.setdefault('train_config', config.to_dict())
    meta.setdefault('train_resolution', train_set.mesh.grid.nx if train_set.mesh.grid else train_set.mesh.size)

    log: List[Dict] = read_metrics(metrics_path, done) if done and metrics_path is not None else []
    if metrics_path is not None:
        write_metrics(log, metrics_path)
    last_epoch = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)
    if done >= last_epoch:
        return state, log

    logger.info("  Обучение: эпохи %d..%d из %d, %d шагов на эпоху, %d параметров",
                done + 1, last_epoch, config.epochs, steps_per_epoch, model.n_parameters)
    names = list(state.parameters)
    started = time.perf_counter()

    for epoch in tqdm(range(done + 1, last_epoch + 1), desc="Эпохи", disable=not _progress_enabled()):
        perm = rng.permutation(train_set.n)
        losses = []
        lr = schedule.max_lr / schedule.div_factor
        for start in range(0, train_set.n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            inputs, targets = batch_arrays(train_set, normalizer, idx)
            lr = onecycle_lr(schedule, state.schedule_step)

            with Tape():
                pred = decode_prediction(model.forward(inputs, 'train'), normalizer)
                loss = relative_l2_loss(pred, targets)
                ops.backward(loss)
            grads = {name: state.parameters[name].grad for name in names}
            grads, _ = clip_by_global_norm(grads, config.clip_norm)
            try:
                adamw_step(state, grads, lr, betas=(config.beta1, config.beta2), eps=config.eps,
                           weight_decay=config.weight_decay)
            except NonFiniteGradient as e:
                state.skipped_steps += 1
                logger.warning("  Шаг %d пропущен: %s", state.schedule_step, e)
            state.schedule_step += 1
            losses.append(float(loss.data))

        train_loss = float(np.mean(losses))
        val_loss = math.nan
        if val_set is not None and val_set.n > 0:
            val_loss = evaluate(model, val_set, normalizer, batch_size=config.batch_size).mean_rel_l2
        log.append({
            'epoch': epoch,
            'step': state.schedule_step,
            'lr': lr,
            'train_rel_l2': train_loss,
            'val_rel_l2': val_loss,
            'wall_ms': round((time.perf_counter() - started) * 1000.0, 3),
        })
        logger.info("  Эпоха %d: train %.4e, val %.4e, lr %.3e", epoch, train_loss, val_loss, lr)
        if metrics_path is not None:
            write_metrics(log, metrics_path)

        state.rng_state = rng.bit_generator.state
        score = val_loss if not math.isnan(val_loss) else train_loss
        if score < state.best_val:
            state.best_val = score
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model, state, meta, normalizer)
        if last_checkpoint_path is not None:
            save_checkpoint(last_checkpoint_path, model, state, meta, normalizer)

    return state, log


def _predict(model: OnoModel, inputs: np.ndarray, normalizer: ChannelNormalizer) -> np.ndarray:
    return decode_prediction(model.forward(inputs, 'eval'), normalizer).data


def evaluate(model: OnoModel, dataset: Dataset, normalizer: ChannelNormalizer, superres_mode: str = 'direct',
             train_resolution: Optional[int] = None, context: str = 'appendix',
             batch_size: int = 8) -> EvalResult:
    """
    Оценка в eval-режиме (буферы заморожены).

    Args:
        model: Обученная модель
        dataset: Набор (разрешение может отличаться от обучающего)
        normalizer: Статистики нормализации из обучения
        superres_mode: 'direct' — прогон на сетке набора; 'query' — вход
            прореживается до train_resolution, а решение запрашивается в узлах набора
        train_resolution: Разрешение обучения (для 'query')
        context: Правило этапов ≥ 2 для 'query'
        batch_size: Размер батча прогона

    Returns:
        EvalResult со средней/медианной ошибкой и таблицей по сэмплам
    """
    if superres_mode not in SUPERRES_MODES:
        raise ValueError(f"неизвестный режим super-resolution: {superres_mode}")

    errors = []
    if superres_mode == 'direct':
        for start in range(0, dataset.n, batch_size):
            idx = np.arange(start, min(start + batch_size, dataset.n))
            inputs, targets = batch_arrays(dataset, normalizer, idx)
            errors.extend(relative_l2_per_sample(_predict(model, inputs, normalizer), targets))
    else:
        coarse_idx, coarse_mesh = _coarse_grid(dataset, train_resolution)
        for start in range(0, dataset.n, batch_size):
            idx = np.arange(start, min(start + batch_size, dataset.n))
            f_x = normalizer.encode_f(dataset.f[idx][:, coarse_idx])
            f_y = resample(coarse_mesh, f_x, dataset.mesh.points)
            pred = forward_query(model, model_inputs(coarse_mesh, f_x), model_inputs(dataset.mesh, f_y), context)
            errors.extend(relative_l2_per_sample(decode_prediction(pred, normalizer).data, dataset.u[idx]))

    errors = np.asarray(errors, dtype=np.float64)
    table = pd.DataFrame({'sample': np.arange(len(errors)), 'rel_l2': errors})
    mean = float(errors.mean()) if len(errors) else math.nan
    median = float(np.median(errors)) if len(errors) else math.nan
    logger.info("  Оценка (%s): %d сэмплов, средняя rel-L2 %.4e, медиана %.4e",
                superres_mode, len(errors), mean, median)
    return EvalResult(mean, median, table)


def _coarse_grid(dataset: Dataset, train_resolution: Optional[int]):
    grid = dataset.mesh.grid
    if train_resolution is None or grid is None:
        raise ShapeMismatch("режим query требует регулярной сетки и разрешения обучения", [])
    if (grid.nx - 1) % (train_resolution - 1):
        raise ShapeMismatch("разрешение набора не кратно разрешению обучения",
                            [(grid.nx,), (train_resolution,)])
    factor = (grid.nx - 1) // (train_resolution - 1)
    return restriction_indices(dataset.mesh, factor), restrict_mesh(dataset.mesh, factor)
