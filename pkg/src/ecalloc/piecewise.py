"""Segmented least-squares fitting with shared breakpoints.

Several response columns are fitted against one abscissa with the same
partition of the (sorted) sample points into contiguous segments; each
segment carries an independent least-squares line per column.  The
partition minimising the summed squared error is found by dynamic
programming over all split positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Segment:
    x_start: float
    x_end: float
    # one (slope, intercept) per response column
    coef: tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class PiecewiseFit:
    segments: tuple[Segment, ...]

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return tuple(s.x_start for s in self.segments[1:])

    def segment_for(self, x: float) -> Segment:
        for s, nxt in zip(self.segments, self.segments[1:]):
            if x < nxt.x_start:
                return s
        return self.segments[-1]

    def __call__(self, x: float) -> np.ndarray:
        s = self.segment_for(x)
        return np.array([a * x + b for a, b in s.coef])


def _line_sse(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Least-squares lines for every column of y; returns (total SSE, coef)."""
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return float(np.sum(resid * resid)), coef


def fit_piecewise(x, y, segment_count: int = 3, min_points: int = 2) -> PiecewiseFit:
    """Fit ``segment_count`` segments of at least ``min_points`` points each."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    order = np.argsort(x, kind="stable")
    x, y = x[order], y[order]
    n = len(x)
    if segment_count < 1:
        raise ValueError("segment_count must be positive")
    if n < min_points * segment_count:
        raise ValueError(f"{n} points cannot support {segment_count} segments "
                         f"of {min_points} points")

    cost = np.full((n, n + 1), np.inf)
    for i in range(n):
        for j in range(i + min_points, n + 1):
            cost[i, j] = _line_sse(x[i:j], y[i:j])[0]

    # best[k, j]: minimal SSE covering points [0, j) with k segments
    best = np.full((segment_count + 1, n + 1), np.inf)
    split = np.zeros((segment_count + 1, n + 1), dtype=int)
    best[0, 0] = 0.0
    for k in range(1, segment_count + 1):
        for j in range(k * min_points, n + 1):
            cands = best[k - 1, :j] + cost[:j, j]
            i = int(np.argmin(cands))
            best[k, j] = cands[i]
            split[k, j] = i

    bounds = [n]
    for k in range(segment_count, 0, -1):
        bounds.append(split[k, bounds[-1]])
    bounds.reverse()

    segments = []
    for i, j in zip(bounds, bounds[1:]):
        _, coef = _line_sse(x[i:j], y[i:j])
        segments.append(Segment(float(x[i]), float(x[j - 1]),
                                tuple((float(a), float(b)) for a, b in coef.T)))
    return PiecewiseFit(tuple(segments))
