"""Calendar-month period boundaries (half-open ``[start, end)``)."""

from __future__ import annotations

import calendar
import datetime as dt
from bisect import bisect_right


def add_months(date: dt.date, months: int) -> dt.date:
    m = date.month - 1 + months
    year, month = date.year + m // 12, m % 12 + 1
    day = min(date.day, calendar.monthrange(year, month)[1])
    return dt.date(year, month, day)


def period_boundaries(start: dt.date, last: dt.date, months: int) -> list[dt.date]:
    """Boundaries ``b0 = start < b1 < ...`` whose half-open spans cover ``[start, last]``."""
    if months <= 0:
        raise ValueError(f"period length must be positive, got {months} months")
    if last < start:
        return [start]
    bounds = [start]
    k = 0
    while bounds[-1] <= last:
        k += 1
        bounds.append(add_months(start, k * months))
    return bounds


def period_index(date: dt.date, bounds: list[dt.date]) -> int:
    """Index ``i`` with ``bounds[i] <= date < bounds[i + 1]``."""
    i = bisect_right(bounds, date) - 1
    if i < 0 or i >= len(bounds) - 1:
        raise ValueError(f"{date} outside periods {bounds[0]}..{bounds[-1]}")
    return i
