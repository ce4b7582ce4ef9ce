"""
Командная строка тулкита ONO
Генерация данных, обучение, оценка, super-resolution и численные проверки
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import pandas as pd
from dotenv import load_dotenv

load_dotenv()

# Добавляем путь к модулям
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.data.dataset_io import ChannelNormalizer, load_dataset, save_dataset, split_dataset, subsample_dataset
from src.data.generators import GENERATORS, generate, generate_darcy2d
from src.export.manifest import RunManifest, load_manifest, manifest_path
from src.export.reports import write_report
from src.model.ono import ModelConfig, OnoModel
from src.numerics.errors import ConfigError, OnoError
from src.training.checkpoint import load_checkpoint, save_checkpoint
from src.training.loop import TrainConfig, evaluate, train
from src.verify.diagnostics import LINEAR_FIT_TOLERANCE, SCOPES, bench_linear, run_grad_check
from src.verify.eigen import AnalyticKernel, recover_eigenfunctions

logger = logging.getLogger("ono")

GRAD_CHECK_THRESHOLD = 1e-4
KERNEL_ALIASES = {'min': 'min', 'min_kernel': 'min', 'rbf': 'rbf'}

# Флаги командной строки → поля ModelConfig / TrainConfig
MODEL_FLAGS = {
    'layers': 'n_layers', 'width': 'd', 'feature_width': 'd_prime', 'k': 'k',
    'momentum': 'ema_momentum', 'eigenmap_norm': 'eigenmap_norm', 'whitening_grad': 'whitening_grad',
    'attn_normalization': 'attn_normalization',
}
TRAIN_FLAGS = {
    'epochs': 'epochs', 'batch_size': 'batch_size', 'lr': 'max_lr', 'weight_decay': 'weight_decay',
    'clip_norm': 'clip_norm',
}


def setup_logging():
    level = os.getenv('ONO_LOG_LEVEL', 'INFO').upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format='%(message)s', stream=sys.stderr)


def data_workers() -> int:
    try:
        return max(1, int(os.getenv('ONO_DATA_WORKERS', '1')))
    except ValueError:
        raise ConfigError("ONO_DATA_WORKERS должен быть целым числом") from None


def int_list(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(',') if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"ожидался список целых через запятую: {text}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='app.py', description="Orthogonal Neural Operator")
    parser.add_argument('--manifest', help="Повторить запуск по манифесту")
    sub = parser.add_subparsers(dest='command')

    p = sub.add_parser('generate-data', help="Синтетический набор PDE")
    p.add_argument('--problem', choices=sorted(GENERATORS), required=True)
    p.add_argument('--n', type=int, required=True)
    p.add_argument('--resolution', type=int, required=True)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', required=True)

    p = sub.add_parser('train', help="Обучение модели")
    p.add_argument('--data', required=True)
    p.add_argument('--config', help="JSON с секциями model и train")
    p.add_argument('--out-dir', required=True)
    p.add_argument('--seed', type=int)
    p.add_argument('--epochs', type=int)
    p.add_argument('--batch-size', type=int)
    p.add_argument('--lr', type=float)
    p.add_argument('--weight-decay', type=float)
    p.add_argument('--clip-norm', type=float)
    p.add_argument('--layers', type=int)
    p.add_argument('--width', type=int)
    p.add_argument('--feature-width', type=int)
    p.add_argument('--k', type=int)
    p.add_argument('--momentum', type=float)
    p.add_argument('--eigenmap-norm', choices=['ortho', 'layer_norm', 'none'])
    p.add_argument('--whitening-grad', action='store_const', const=True)
    p.add_argument('--no-attn-normalization', dest='attn_normalization', action='store_const', const=False)
    p.add_argument('--resume', metavar='CKPT', help="Продолжить обучение с чекпоинта (обычно last.onoc)")
    p.add_argument('--stop-epoch', type=int, help="Остановиться после этой эпохи")

    p = sub.add_parser('eval', help="Оценка чекпоинта на наборе")
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--superres-mode', choices=['direct', 'query'], default='direct')
    p.add_argument('--context', choices=['appendix', 'input'], default='appendix')
    p.add_argument('--report', required=True, help=".csv или .xlsx")

    p = sub.add_parser('super-res', help="Ошибка по разрешениям без дообучения")
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--train-res', type=int)
    p.add_argument('--eval-res-list', type=int_list, required=True)
    p.add_argument('--data', help="Набор на максимальном разрешении; иначе генерируется Darcy")
    p.add_argument('--n', type=int, default=20)
    p.add_argument('--seed', type=int, default=1)
    p.add_argument('--context', choices=['appendix', 'input'], default='appendix')
    p.add_argument('--out', required=True, help=".csv или .xlsx")

    p = sub.add_parser('verify-eigen', help="Восстановление собственных функций ядра")
    p.add_argument('--kernel', choices=sorted(KERNEL_ALIASES), default='min')
    p.add_argument('--k', type=int, default=3)
    p.add_argument('--grid', type=int, default=256)
    p.add_argument('--steps', type=int, default=2000)
    p.add_argument('--width', type=int, default=32)
    p.add_argument('--length-scale', type=float, default=0.1)
    p.add_argument('--samples-per-step', type=int, default=0)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', default='verify_eigen.csv')

    p = sub.add_parser('grad-check', help="Проверка градиентов конечными разностями")
    p.add_argument('--scope', choices=SCOPES, default='model')
    p.add_argument('--trials', type=int, default=3)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--threshold', type=float, default=GRAD_CHECK_THRESHOLD)
    p.add_argument('--out', default='grad_check.csv')

    p = sub.add_parser('bench-linear', help="Время слоя ортогонального внимания от M")
    p.add_argument('--m-list', type=int_list, default=[256, 512, 1024, 2048])
    p.add_argument('--k', type=int, default=16)
    p.add_argument('--repeats', type=int, default=5)
    p.add_argument('--tolerance', type=float, default=LINEAR_FIT_TOLERANCE, help="Допустимый остаток линейной подгонки")
    p.add_argument('--out', default='bench_linear.csv')
    return parser


def load_config_file(path: Optional[str]) -> Dict[str, Dict]:
    """JSON {"model": {...}, "train": {...}}; неизвестные секции дают ConfigError"""
    if not path:
        return {'model': {}, 'train': {}}
    try:
        data = json.loads(Path(path).read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: некорректный JSON: {e}") from None
    unknown = sorted(set(data) - {'model', 'train'})
    if unknown:
        raise ConfigError(f"{path}: неизвестные секции {', '.join(unknown)}")
    return {'model': dict(data.get('model', {})), 'train': dict(data.get('train', {}))}


def resolve_configs(args, dataset) -> Tuple[ModelConfig, TrainConfig]:
    """
    Файл конфигурации, поверх него флаги; размеры входа берутся из набора.

    При --resume основой служат конфигурации из чекпоинта.
    """
    cfg = load_config_file(args.config)
    model_cfg, train_cfg = cfg['model'], cfg['train']
    if getattr(args, 'resume', None):
        ckpt = load_checkpoint(args.resume)
        saved_train = dict(ckpt.extras.get('train_config', {}))
        saved_train.pop('resume_from', None)
        model_cfg = dict(ckpt.model.config.to_dict(), **model_cfg)
        train_cfg = dict(saved_train, **train_cfg)
        train_cfg['resume_from'] = args.resume
    for flag, key in MODEL_FLAGS.items():
        if getattr(args, flag) is not None:
            model_cfg[key] = getattr(args, flag)
    for flag, key in TRAIN_FLAGS.items():
        if getattr(args, flag) is not None:
            train_cfg[key] = getattr(args, flag)
    if args.seed is not None:
        model_cfg['seed'] = args.seed
        train_cfg['seed'] = args.seed
    model_cfg.update(coord_dim=dataset.mesh.dim, in_channels=dataset.d_f, out_channels=dataset.d_u)
    return ModelConfig.from_dict(model_cfg), TrainConfig.from_dict(train_cfg)


# ============ Подкоманды ============

def cmd_generate_data(args, manifest: RunManifest) -> int:
    out = Path(args.out)
    manifest.seed = args.seed
    manifest.config = {'problem': args.problem, 'n': args.n, 'resolution': args.resolution}
    manifest.artifacts = {'dataset': str(out)}
    mpath = manifest.write(manifest_path(out, is_dir=False))

    dataset = generate(args.problem, args.n, args.resolution, args.seed, workers=data_workers())
    save_dataset(dataset, out)
    manifest.config['provenance'] = dataset.provenance
    manifest.finish(mpath)
    print(f"  Набор {args.problem}: {dataset.n} пар, M={dataset.mesh.size} → {out}")
    return 0


def cmd_train(args, manifest: RunManifest) -> int:
    out_dir = Path(args.out_dir)
    dataset = load_dataset(args.data)
    model_config, train_config = resolve_configs(args, dataset)
    manifest.seed = train_config.seed
    manifest.config = {'model': model_config.to_dict(), 'train': train_config.to_dict()}
    manifest.artifacts = {
        'metrics': str(out_dir / 'metrics.csv'),
        'best_checkpoint': str(out_dir / 'best.onoc'),
        'last_checkpoint': str(out_dir / 'last.onoc'),
    }
    mpath = manifest.write(manifest_path(out_dir, is_dir=True))

    train_set, val_set, test_set = split_dataset(dataset, train_config.seed)
    normalizer = ChannelNormalizer.fit(train_set)
    model = OnoModel(model_config)
    grid = dataset.mesh.grid
    extras = {'train_resolution': grid.nx if grid else dataset.mesh.size, 'data': str(args.data)}
    state, log = train(model, train_set, val_set, train_config, normalizer,
                       metrics_path=out_dir / 'metrics.csv', checkpoint_path=out_dir / 'best.onoc', extras=extras,
                       last_checkpoint_path=out_dir / 'last.onoc', stop_epoch=args.stop_epoch)
    if not (out_dir / 'last.onoc').exists():
        save_checkpoint(out_dir / 'last.onoc', model, state, dict(extras, train_config=train_config.to_dict()),
                        normalizer)

    if not (out_dir / 'best.onoc').exists():
        manifest.artifacts.pop('best_checkpoint')
    if test_set.n and log:
        result = evaluate(model, test_set, normalizer, batch_size=train_config.batch_size)
        manifest.config['test_rel_l2'] = result.mean_rel_l2
        print(f"  Тест: средняя rel-L2 {result.mean_rel_l2:.4e}")
    manifest.finish(mpath)
    if log:
        print(f"  Обучение завершено: {len(log)} эпох, лучшая val {state.best_val:.4e}")
    return 0


def cmd_eval(args, manifest: RunManifest) -> int:
    report = Path(args.report)
    manifest.config = {'checkpoint': args.checkpoint, 'data': args.data, 'superres_mode': args.superres_mode,
                       'context': args.context}
    manifest.artifacts = {'report': str(report)}
    mpath = manifest.write(manifest_path(report, is_dir=False))

    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    normalizer = ckpt.normalizer or ChannelNormalizer.fit(dataset)
    result = evaluate(ckpt.model, dataset, normalizer, args.superres_mode,
                      train_resolution=ckpt.extras.get('train_resolution'), context=args.context)
    write_report(result.per_sample, report, title=f"Относительная L2 ({args.superres_mode})",
                 summary_columns=['rel_l2'])
    manifest.finish(mpath)
    print(f"  Средняя rel-L2: {result.mean_rel_l2:.4e}, медиана: {result.median_rel_l2:.4e}")
    return 0


def cmd_super_res(args, manifest: RunManifest) -> int:
    out = Path(args.out)
    ckpt = load_checkpoint(args.checkpoint)
    train_res = args.train_res or ckpt.extras.get('train_resolution')
    if train_res is None:
        raise ConfigError("неизвестно разрешение обучения: укажите --train-res")
    resolutions = sorted(set(args.eval_res_list) | {train_res})
    manifest.seed = args.seed
    manifest.config = {'checkpoint': args.checkpoint, 'train_res': train_res, 'eval_res_list': resolutions,
                       'data': args.data, 'n': args.n, 'context': args.context}
    manifest.artifacts = {'report': str(out)}
    mpath = manifest.write(manifest_path(out, is_dir=False))

    # Шаг 1: набор на максимальном разрешении
    finest = max(resolutions)
    if args.data:
        base = load_dataset(args.data)
    else:
        base = generate_darcy2d(args.n, finest, args.seed, workers=data_workers())
    if base.mesh.grid is None:
        raise ConfigError("super-res требует набор на регулярной сетке")

    # Шаг 2: прореживание и оценка в обоих режимах
    rows = []
    normalizer = ckpt.normalizer or ChannelNormalizer.fit(base)
    for res in resolutions:
        nx = base.mesh.grid.nx
        if (nx - 1) % (res - 1):
            raise ConfigError(f"разрешение {res} не получается прореживанием сетки {nx}")
        data = subsample_dataset(base, (nx - 1) // (res - 1))
        for mode in ('direct', 'query'):
            if mode == 'query' and (res - 1) % (train_res - 1):
                continue
            result = evaluate(ckpt.model, data, normalizer, mode, train_resolution=train_res, context=args.context)
            rows.append({'resolution': res, 'mode': mode, 'mean_rel_l2': result.mean_rel_l2,
                         'median_rel_l2': result.median_rel_l2})
            print(f"  {res}x{res} ({mode}): {result.mean_rel_l2:.4e}")

    write_report(pd.DataFrame(rows, columns=['resolution', 'mode', 'mean_rel_l2', 'median_rel_l2']), out,
                 title="Zero-shot super-resolution", summary_columns=['mean_rel_l2'])
    manifest.finish(mpath)
    return 0


def cmd_verify_eigen(args, manifest: RunManifest) -> int:
    out = Path(args.out)
    kernel = AnalyticKernel(KERNEL_ALIASES[args.kernel], args.length_scale)
    manifest.seed = args.seed
    manifest.config = {'kernel': kernel.name, 'length_scale': kernel.length_scale, 'k': args.k,
                       'grid': args.grid, 'steps': args.steps, 'width': args.width,
                       'samples_per_step': args.samples_per_step}
    manifest.artifacts = {'report': str(out)}
    mpath = manifest.write(manifest_path(out, is_dir=False))

    report = recover_eigenfunctions(kernel, args.width, args.k, args.steps, args.seed, grid_size=args.grid,
                                    samples_per_step=args.samples_per_step)
    frame = report.to_frame()
    write_report(frame, out, title=f"Собственные функции ядра {kernel.name}", summary_columns=['alignment'])
    manifest.finish(mpath)
    for row in frame.itertuples():
        print(f"  i={row.i}: μ={row.eigenvalue_true:.4f}, μ̂={row.eigenvalue_learned:.4f}, "
              f"выравнивание {row.alignment:.4f}")
    return 0


def cmd_grad_check(args, manifest: RunManifest) -> int:
    out = Path(args.out)
    manifest.seed = args.seed
    manifest.config = {'scope': args.scope, 'trials': args.trials, 'threshold': args.threshold}
    manifest.artifacts = {'report': str(out)}
    mpath = manifest.write(manifest_path(out, is_dir=False))

    table = run_grad_check(args.scope, args.trials, args.seed)
    write_report(table, out, title=f"grad-check: {args.scope}")
    manifest.finish(mpath)
    worst = float(table['max_rel_error'].max()) if len(table) else 0.0
    print(f"  max rel. error: {worst:.3e}")
    return 0 if worst < args.threshold else 1


def cmd_bench_linear(args, manifest: RunManifest) -> int:
    out = Path(args.out)
    manifest.config = {'m_list': args.m_list, 'k': args.k, 'repeats': args.repeats, 'tolerance': args.tolerance}
    manifest.artifacts = {'report': str(out)}
    mpath = manifest.write(manifest_path(out, is_dir=False))

    table, worst = bench_linear(args.m_list, k=args.k, repeats=args.repeats)
    write_report(table, out, title="Время слоя от M")
    manifest.finish(mpath)
    print(f"  Максимальный остаток линейной подгонки: {worst:.1%} (допуск {args.tolerance:.0%})")
    return 0 if worst <= args.tolerance else 1


COMMANDS = {
    'generate-data': cmd_generate_data,
    'train': cmd_train,
    'eval': cmd_eval,
    'super-res': cmd_super_res,
    'verify-eigen': cmd_verify_eigen,
    'grad-check': cmd_grad_check,
    'bench-linear': cmd_bench_linear,
}


def cli_dispatch(argv: Optional[List[str]] = None) -> int:
    """
    Разбор аргументов и запуск подкоманды.

    Returns:
        0 — успех, 1 — ошибка выполнения, 2 — ошибка использования
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        if args.manifest:
            if args.command:
                parser.print_usage(sys.stderr)
                print("app.py: error: --manifest нельзя совмещать с подкомандой", file=sys.stderr)
                return 2
            replay = load_manifest(args.manifest)
            logger.info("  Повтор запуска %s из %s", replay.subcommand, args.manifest)
            return cli_dispatch(replay.argv)
        if not args.command:
            parser.print_usage(sys.stderr)
            print("app.py: error: не указана подкоманда", file=sys.stderr)
            return 2
        manifest = RunManifest(subcommand=args.command, argv=argv)
        return COMMANDS[args.command](args, manifest)
    except (OnoError, OSError, ValueError) as e:
        print(f"Ошибка: {e}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    setup_logging()
    sys.exit(cli_dispatch())
