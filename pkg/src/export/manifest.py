"""
Манифест запуска: подкоманда, argv, разрешённая конфигурация, артефакты
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Union

from src.numerics.errors import ConfigError

logger = logging.getLogger(__name__)

TOOL_VERSION = "0.1.0"
MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    subcommand: str
    argv: List[str]
    config: Dict = field(default_factory=dict)
    seed: Optional[int] = None
    artifacts: Dict[str, str] = field(default_factory=dict)
    tool_version: str = TOOL_VERSION
    started_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    wall_seconds: Optional[float] = None
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data.pop('_t0')
        return data

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False, default=str), encoding='utf-8')
        return path

    def finish(self, path: Union[str, Path]) -> Path:
        """Записать время выполнения"""
        self.wall_seconds = round(time.perf_counter() - self._t0, 3)
        return self.write(path)


def manifest_path(out: Union[str, Path], is_dir: bool) -> Path:
    """Файл манифеста рядом с артефактом или внутри каталога вывода"""
    out = Path(out)
    return out / MANIFEST_NAME if is_dir else out.with_name(out.name + '.manifest.json')


def load_manifest(path: Union[str, Path]) -> RunManifest:
    try:
        data = json.loads(Path(path).read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: манифест не является JSON: {e}") from None
    if 'subcommand' not in data or 'argv' not in data:
        raise ConfigError(f"{path}: в манифесте нет subcommand/argv")
    known = {'subcommand', 'argv', 'config', 'seed', 'artifacts', 'tool_version', 'started_at', 'wall_seconds'}
    return RunManifest(**{k: v for k, v in data.items() if k in known})
