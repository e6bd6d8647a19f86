"""Central-difference gradient oracle (float64), independent of the tape."""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ConfigurationError, NumericError


def finite_difference_oracle(
    f: Callable[[list[np.ndarray]], float],
    params: Sequence[np.ndarray],
    h: float = 1e-3,
    probes: Iterable[tuple[int, int]] | None = None,
) -> list[np.ndarray]:
    """Estimate ``df/dparams`` by central differences.

    ``f`` receives float64 copies of ``params`` and must return a scalar. With
    ``probes`` (pairs of ``(param index, flat element index)``) only those
    entries are estimated; the rest of the returned arrays are NaN.
    """
    if not 1e-5 <= h <= 1e-2:
        raise ConfigurationError(f"step h={h} outside [1e-5, 1e-2]")
    xs = [np.array(p, dtype=np.float64) for p in params]
    grads = [np.full(x.shape, np.nan) if probes is not None else np.zeros(x.shape) for x in xs]
    if probes is None:
        probes = [(i, j) for i, x in enumerate(xs) for j in range(x.size)]

    def evaluate() -> float:
        val = float(f(xs))
        if not math.isfinite(val):
            raise NumericError(f"objective returned non-finite value {val}")
        return val

    for i, j in probes:
        flat = xs[i].reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        up = evaluate()
        flat[j] = orig - h
        down = evaluate()
        flat[j] = orig
        grads[i].reshape(-1)[j] = (up - down) / (2.0 * h)
    return grads


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative discrepancy ``|a-b| / max(|a|, |b|)``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
