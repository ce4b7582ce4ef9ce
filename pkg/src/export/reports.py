"""
Запись табличных отчётов: CSV по умолчанию, xlsx по расширению файла
"""

import logging
from pathlib import Path
from typing import Sequence, Union

import pandas as pd

from src.export.excel_export import export_report_to_excel

logger = logging.getLogger(__name__)


def write_report(df: pd.DataFrame, path: Union[str, Path], title: str = "Отчёт",
                 summary_columns: Sequence[str] = ()) -> Path:
    """
    Сохранить таблицу.

    Args:
        df: Данные
        path: Файл (.csv или .xlsx)
        title: Заголовок листа xlsx
        summary_columns: Колонки со средним в строке итога (только xlsx)
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == '.xlsx':
        path.write_bytes(export_report_to_excel(df, title, summary_columns))
    else:
        df.to_csv(path, index=False)
    logger.info("  Отчёт: %s (%d строк)", path, len(df))
    return path
