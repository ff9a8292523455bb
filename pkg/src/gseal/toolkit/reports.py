"""Table assembly with the formatting the result tables use everywhere.

Quality metrics print with 4 decimals, accuracies as percents with 2.
Column kind is inferred from the header name.
"""

from __future__ import annotations

import math

__all__ = ["format_metric", "format_percent", "report_assemble"]

PERCENT_COLUMNS = ("acc", "accuracy", "rate")


def format_metric(x: float) -> str:
    if math.isinf(x):
        return "inf"
    return f"{x:.4f}"


def format_percent(x: float) -> str:
    return f"{100.0 * x:.2f}%"


def _is_percent(column: str) -> bool:
    col = column.lower()
    return any(tag in col for tag in PERCENT_COLUMNS)


def _cell(column: str, value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (int,)) and not isinstance(value, bool):
        return str(value)
    if _is_percent(column):
        return format_percent(float(value))
    return format_metric(float(value))


def report_assemble(header, rows):
    """(csv_text, aligned_text) for one suite's result rows.

    An empty suite still yields the header line.
    """
    header = list(header)
    formatted = [[_cell(col, v) for col, v in zip(header, row)] for row in rows]
    csv_lines = [",".join(header)] + [",".join(cells) for cells in formatted]
    csv_text = "\n".join(csv_lines) + "\n"

    widths = [len(col) for col in header]
    for cells in formatted:
        widths = [max(w, len(c)) for w, c in zip(widths, cells)]
    def line(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    text_lines = [line(header), line(["-" * w for w in widths])]
    text_lines += [line(cells) for cells in formatted]
    return csv_text, "\n".join(text_lines) + "\n"
