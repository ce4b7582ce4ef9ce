"""
Экспорт отчётов в Excel
"""

import math
from io import BytesIO
from typing import Optional, Sequence

import pandas as pd
from openpyxl import Workbook
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side
from openpyxl.utils import get_column_letter


def safe_float(value, default=None) -> Optional[float]:
    """Безопасное преобразование в float: NaN, Inf, None, строки → default"""
    if value is None:
        return default
    if isinstance(value, (int, float)):
        if math.isnan(value) or math.isinf(value):
            return default
        return float(value)
    try:
        result = float(value)
    except (ValueError, TypeError):
        return default
    return default if math.isnan(result) or math.isinf(result) else result


def safe_str(value) -> str:
    """Безопасное преобразование в строку: NaN, None → пустая строка"""
    if value is None:
        return ''
    if isinstance(value, float) and (math.isnan(value) or math.isinf(value)):
        return ''
    s = str(value)
    if s in ('nan', 'None', '<NA>', 'NaT'):
        return ''
    return s


THIN = Side(style='thin')
BORDER = Border(left=THIN, right=THIN, top=THIN, bottom=THIN)
HEADER_FILL = PatternFill(start_color="4472C4", end_color="4472C4", fill_type="solid")
HEADER_FONT = Font(bold=True, size=11, color="FFFFFF")
ERROR_FORMAT = '0.000000'
TIME_FORMAT = '#,##0.000'
INT_FORMAT = '#,##0'


def _number_format(column: str) -> str:
    if column in ('wall_ms', 'fit_ms'):
        return TIME_FORMAT
    if column in ('epoch', 'step', 'sample', 'k', 'i', 'M', 'resolution', 'trial', 'n'):
        return INT_FORMAT
    return ERROR_FORMAT


def export_report_to_excel(df: pd.DataFrame, title: str, summary_columns: Sequence[str] = (),
                           sheet_name: str = "Отчёт") -> bytes:
    """
    Таблица отчёта в xlsx: заголовок, шапка, данные, строка СРЕДНЕЕ.

    Args:
        df: Данные отчёта
        title: Заголовок над таблицей
        summary_columns: Колонки, для которых считается среднее в итоговой строке
        sheet_name: Имя листа

    Returns:
        Байты Excel файла
    """
    output = BytesIO()
    wb = Workbook()
    ws = wb.active
    ws.title = sheet_name[:31]

    columns = list(df.columns)
    width = max(len(columns), 1)

    # Заголовок документа
    if width > 1:
        ws.merge_cells(start_row=1, start_column=1, end_row=1, end_column=width)
    ws['A1'] = title
    ws['A1'].font = Font(bold=True, size=14)
    ws['A1'].alignment = Alignment(horizontal='center')

    # Шапка
    start_row = 3
    for col_idx, col_name in enumerate(columns, 1):
        cell = ws.cell(row=start_row, column=col_idx, value=col_name)
        cell.font = HEADER_FONT
        cell.fill = HEADER_FILL
        cell.border = BORDER
        cell.alignment = Alignment(horizontal='center', wrap_text=True)

    # Данные
    row_idx = start_row + 1
    for _, row in df.iterrows():
        for col_idx, col_name in enumerate(columns, 1):
            value = row[col_name]
            number = safe_float(value) if not isinstance(value, str) else None
            cell = ws.cell(row=row_idx, column=col_idx, value=number if number is not None else safe_str(value))
            cell.border = BORDER
            if number is not None:
                cell.number_format = _number_format(col_name)
        row_idx += 1

    # Среднее
    if summary_columns and len(df):
        ws.cell(row=row_idx, column=1, value="СРЕДНЕЕ:").font = Font(bold=True)
        ws.cell(row=row_idx, column=1).alignment = Alignment(horizontal='right')
        ws.cell(row=row_idx, column=1).border = BORDER
        for col_name in summary_columns:
            values = [v for v in (safe_float(x) for x in df[col_name]) if v is not None]
            if not values:
                continue
            cell = ws.cell(row=row_idx, column=columns.index(col_name) + 1, value=sum(values) / len(values))
            cell.font = Font(bold=True)
            cell.border = BORDER
            cell.number_format = _number_format(col_name)

    # Ширина колонок
    for col_idx, col_name in enumerate(columns, 1):
        ws.column_dimensions[get_column_letter(col_idx)].width = max(10, len(str(col_name)) + 4)

    wb.save(output)
    output.seek(0)
    return output.getvalue()

