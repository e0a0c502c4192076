# utils/helpers.py
from typing import Sequence

import numpy as np


def fit_loglog_slope(h: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of log(error) against log(h)"""
    h = np.asarray(h, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    if h.size < 2 or h.size != errors.size:
        raise ValueError("need at least two (h, error) pairs of equal length")
    return float(np.polyfit(np.log(h), np.log(errors), 1)[0])


def format_bytes(n: int) -> str:
    """Human readable byte count"""
    size = float(n)
    for unit in ('B', 'KiB', 'MiB', 'GiB'):
        if size < 1024 or unit == 'GiB':
            return f"{size:.1f} {unit}" if unit != 'B' else f"{int(size)} B"
        size /= 1024
    return f"{size:.1f} GiB"


def split_override(text: str):
    """'a.b.c=value' -> (['a', 'b', 'c'], 'value')"""
    if '=' not in text:
        raise ValueError(f"override '{text}' is not of the form key.path=value")
    key, value = text.split('=', 1)
    path = [part for part in key.strip().split('.')]
    if not all(path):
        raise ValueError(f"override '{text}' has an empty key segment")
    return path, value
