"""
Сборка модели ONO

Энкодер → L этапов (блок линейного трансформера, ортогональное внимание).
FFN последнего этапа выдаёт d_u каналов и служит проекцией 𝒫.
"""

import logging
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Tuple

from src.model.nn_blocks import EncoderMlp, LinearAttnBlock, block_forward, encode
from src.model.ortho_attention import (
    EIGENMAP_NORMS, CovarianceBuffer, OrthoAttentionLayer, attend, eigenmaps, layer_forward,
)
from src.numerics import autodiff as ops
from src.numerics.autodiff import Tensor
from src.numerics.errors import ConfigError, MeshTooSmall, ShapeMismatch
from src.numerics.seeding import substream

logger = logging.getLogger(__name__)

QUERY_CONTEXTS = ('appendix', 'input')


@dataclass
class ModelConfig:
    """Гиперпараметры архитектуры"""
    n_layers: int = 4
    d: int = 64
    d_prime: int = 64
    k: int = 16
    ema_momentum: float = 0.1
    attn_normalization: bool = True
    seed: int = 0
    coord_dim: int = 2
    in_channels: int = 1
    out_channels: int = 1
    ffn_mult: int = 4
    eigenmap_norm: str = 'ortho'
    whitening_grad: bool = False

    def validate(self) -> 'ModelConfig':
        counts = {
            'n_layers': self.n_layers, 'd': self.d, 'd_prime': self.d_prime, 'k': self.k,
            'coord_dim': self.coord_dim, 'in_channels': self.in_channels,
            'out_channels': self.out_channels, 'ffn_mult': self.ffn_mult,
        }
        for name, value in counts.items():
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} должен быть целым >= 1, получено {value}")
        if not 0.0 < self.ema_momentum <= 1.0:
            raise ConfigError(f"ema_momentum вне (0, 1]: {self.ema_momentum}")
        if self.eigenmap_norm not in EIGENMAP_NORMS:
            raise ConfigError(f"eigenmap_norm: ожидалось одно из {EIGENMAP_NORMS}, получено {self.eigenmap_norm}")
        return self

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'ModelConfig':
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"неизвестные ключи ModelConfig: {', '.join(unknown)}")
        return cls(**data).validate()

    @property
    def input_width(self) -> int:
        return self.coord_dim + self.in_channels


def count_parameters(config: ModelConfig) -> int:
    """
    Число обучаемых скаляров по формуле из конфигурации.

    Args:
        config: Конфигурация модели

    Returns:
        Общее число параметров
    """
    d, dp, k, m = config.d, config.d_prime, config.k, config.ffn_mult

    def ffn(d_in, hidden, d_out):
        return d_in * hidden + hidden + hidden * d_out + d_out

    encoder = (config.input_width * 2 * dp + 2 * dp) + (2 * dp * dp + dp) + (2 * dp * d + d)
    block = 3 * dp * dp + 2 * (2 * dp) + ffn(dp, m * dp, dp)

    def ortho(out_dim):
        return dp * k + d * d + k + 2 * d + ffn(d, m * d, out_dim)

    stages = (config.n_layers - 1) * (block + ortho(d)) + block + ortho(config.out_channels)
    return encoder + stages


class OnoModel:
    """
    Оператор 𝒫 ∘ 𝒦^(L) ∘ … ∘ 𝒦^(1) ∘ ℰ.

    Все параметры инициализируются из подпотока 'init' корневого seed.
    """

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        rng = substream(config.seed, 'init')
        self.encoder = EncoderMlp(rng, config.input_width, config.d_prime, config.d)
        self.stages: List[Tuple[LinearAttnBlock, OrthoAttentionLayer]] = []
        for l in range(config.n_layers):
            last = l == config.n_layers - 1
            block = LinearAttnBlock(rng, config.d_prime, config.ffn_mult)
            layer = OrthoAttentionLayer(
                rng, config.d_prime, config.d, config.k,
                out_dim=config.out_channels if last else config.d,
                ffn_mult=config.ffn_mult,
                momentum=config.ema_momentum,
                attn_normalization=config.attn_normalization,
                eigenmap_norm=config.eigenmap_norm,
                whitening_grad=config.whitening_grad,
            )
            self.stages.append((block, layer))
        logger.debug("  ONO: L=%d, d=%d, d'=%d, k=%d, параметров %d",
                     config.n_layers, config.d, config.d_prime, config.k, self.n_parameters)

    def parameters(self) -> Dict[str, Tensor]:
        """Именованные параметры в стабильном порядке"""
        params = {f"encoder.{name}": p for name, p in self.encoder.parameters().items()}
        for l, (block, layer) in enumerate(self.stages):
            params.update({f"stage{l}.block.{name}": p for name, p in block.parameters().items()})
            params.update({f"stage{l}.ortho.{name}": p for name, p in layer.parameters().items()})
        return params

    def buffers(self) -> Dict[str, CovarianceBuffer]:
        return {f"stage{l}.ortho.buffer": layer.buffer for l, (_, layer) in enumerate(self.stages)}

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def _check_inputs(self, inputs) -> Tensor:
        x = ops.as_tensor(inputs)
        if x.ndim not in (2, 3) or x.shape[-1] != self.config.input_width:
            raise ShapeMismatch(
                f"вход модели: ожидалось (..., M, {self.config.input_width})", [x.shape]
            )
        return x

    def forward(self, inputs, mode: str = 'eval') -> Tensor:
        """
        Прямой проход на сетке входа.

        Args:
            inputs: (N, M, d₀ + d_f) или (M, d₀ + d_f) — координаты и значения f
            mode: 'train' обновляет буферы ковариации, 'eval' только читает их

        Returns:
            Предсказание u той же ведущей формы с d_u каналами
        """
        x = self._check_inputs(inputs)
        m = x.shape[-2]
        if mode == 'train' and self.config.eigenmap_norm == 'ortho' and m < self.config.k:
            raise MeshTooSmall(f"сетка из {m} точек меньше k={self.config.k}")
        g, h = encode(self.encoder, x)
        for block, layer in self.stages:
            g = block_forward(block, g)
            h = layer_forward(layer, g, h, mode)
        return h

    def __call__(self, inputs, mode: str = 'eval') -> Tensor:
        return self.forward(inputs, mode)


def forward_query(model: OnoModel, x_inputs, y_inputs, context: str = 'appendix') -> Tensor:
    """
    Запрос решения в точках Y по входу на сетке X (вариант с кросс-вниманием).

    Этап 1: h(Y) = FFN(LN(ψ̂(Y) diag(μ̂) (1/M) ψ̂(X)ᵀ h(X) w_v)) без остаточной связи.
    Далее при context='appendix' этапы — самовнимание по Y, при context='input'
    свёртка идёт по X, а X распространяется обычным прямым проходом.
    Нижний поток на Y — кросс линейное внимание (запросы Y, ключи/значения X).
    Только eval: буферы не меняются.

    Args:
        model: Модель с инициализированными буферами
        x_inputs: (N, M, d₀ + d_f) вход на X
        y_inputs: (N, M′, d₀ + d_f) координаты Y со значениями f на Y
        context: 'appendix' | 'input'

    Returns:
        (N, M′, d_u)
    """
    if context not in QUERY_CONTEXTS:
        raise ValueError(f"неизвестный контекст запроса: {context}")
    x_in = model._check_inputs(x_inputs)
    y_in = model._check_inputs(y_inputs)
    if x_in.ndim != y_in.ndim or (x_in.ndim == 3 and x_in.shape[0] != y_in.shape[0]):
        raise ShapeMismatch("forward_query: батчи X и Y", [x_in.shape, y_in.shape])

    gx, hx = encode(model.encoder, x_in)
    gy, _ = encode(model.encoder, y_in)
    hy: Optional[Tensor] = None
    for l, (block, layer) in enumerate(model.stages):
        gy = block_forward(block, gy, context=gx)
        gx = block_forward(block, gx)
        psi_y = eigenmaps(layer, gy, 'eval')
        psi_x = eigenmaps(layer, gx, 'eval')
        if l == 0:
            hy = layer.output(attend(layer, psi_y, psi_x, hx))
        elif context == 'appendix':
            hy = layer.output(attend(layer, psi_y, psi_y, hy) + hy)
        else:
            hy = layer.output(attend(layer, psi_y, psi_x, hx) + hy)
        if l + 1 < len(model.stages):
            hx = layer.output(attend(layer, psi_x, psi_x, hx) + hx)
    return hy
