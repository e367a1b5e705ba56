"""Continuous longitudinal curves from episodic series.

Event series become intensity curves (events/year) via a randomized-partition
density average; value series become shape-preserving monotone cubic
interpolants. Both are stored as values on a uniform time grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._seeding import derive_rng
from .ehr_ingest import EventSeries, RecordSpan, ValueSeries

DEFAULT_RESOLUTION = 52.0

INTENSITY = "intensity"
VALUE = "value"


@dataclass(frozen=True)
class Grid:
    """Uniform time grid including both endpoints."""

    start: float
    end: float
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("grid needs at least 2 points")
        if not self.end > self.start:
            raise ValueError(f"grid end {self.end} must exceed start {self.start}")

    @classmethod
    def for_span(cls, span: RecordSpan, resolution: float = DEFAULT_RESOLUTION) -> "Grid":
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        count = max(2, int(math.ceil((span.end - span.start) * resolution)) + 1)
        return cls(span.start, span.end, count)

    @property
    def spacing(self) -> float:
        return (self.end - self.start) / (self.count - 1)

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.start, self.end, self.count)


@dataclass(frozen=True)
class IntensityConfig:
    iterations: int = 100
    max_bins: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.max_bins < 1:
            raise ValueError("max_bins must be >= 1")


@dataclass(frozen=True, eq=False)
class LongitudinalCurve:
    record_id: str
    variable_id: str
    kind: str
    grid: Grid
    values: np.ndarray
    interpolant: object = field(default=None, repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (self.grid.count,):
            raise ValueError(f"expected {self.grid.count} values, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("curve values must be finite")
        if self.kind == INTENSITY and np.any(values < 0):
            raise ValueError("intensity curve has negative values")
        if self.kind not in (INTENSITY, VALUE):
            raise ValueError(f"unknown curve kind {self.kind!r}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __call__(self, t):
        return evaluate_curve(self, t)


def estimate_intensity(events: EventSeries, span: RecordSpan, grid: Grid,
                       cfg: IntensityConfig = IntensityConfig()) -> LongitudinalCurve:
    """Intensity curve as the mean of randomly partitioned piecewise-constant densities.

    Each of ``cfg.iterations`` rounds draws a bin count B uniformly from
    ``1..min(N, max_bins)`` and B-1 uniform interior boundaries; the density in
    a bin is its event count over its width. Every round integrates to N over
    the span, so the averaged curve does too, up to grid discretization.
    Point evaluation misses or overweights bins narrower than the grid
    spacing, so bursts of events much tighter than the grid can break this.
    The random stream depends only on ``(cfg.seed, record_id, variable_id)``.
    """
    if grid.count < 2:
        raise ValueError("empty grid")
    if grid.start > span.start or grid.end < span.end:
        raise ValueError("grid does not cover the record span")
    times = np.sort(events.times)
    if len(times) and (times[0] < span.start or times[-1] > span.end):
        raise ValueError(
            f"event outside span [{span.start}, {span.end}] in "
            f"{events.record_id}/{events.variable_id}")

    pts = grid.points
    out = np.zeros(grid.count)
    n_events = len(times)
    if n_events == 0:
        return LongitudinalCurve(events.record_id, events.variable_id, INTENSITY, grid, out)

    rng = derive_rng(cfg.seed, events.record_id, events.variable_id)
    K = cfg.iterations
    width_years = span.end - span.start
    nb_max = min(n_events, cfg.max_bins)
    n_bins = rng.integers(1, nb_max + 1, size=K)
    inner = rng.random((K, nb_max - 1))
    unused = np.arange(nb_max - 1)[None, :] >= (n_bins - 1)[:, None]
    inner[unused] = 1.0
    inner.sort(axis=1)
    # work in span-normalized time u in [0, 1]
    edges = np.hstack([np.zeros((K, 1)), inner, np.ones((K, 1))])
    widths = np.diff(edges, axis=1) * width_years

    # Bin b holds u with edges[b] <= u < edges[b+1]; the last used bin is
    # closed at u = 1 and unused bins are empty.
    search_edges = edges.copy()
    search_edges[np.arange(nb_max + 1)[None, :] >= n_bins[:, None]] = 2.0

    u_events = (times - span.start) / width_years
    counts = np.diff(np.searchsorted(u_events, search_edges, side="left"), axis=1)
    dens = np.divide(counts, widths, out=np.zeros_like(widths), where=widths > 0)

    inside = (pts >= span.start) & (pts <= span.end)
    u_grid = (pts[inside] - span.start) / width_years
    per_bin = np.diff(np.searchsorted(u_grid, search_edges, side="left"), axis=1)
    vals = np.repeat(dens.ravel(), per_bin.ravel()).reshape(K, len(u_grid))
    out[inside] = vals.mean(axis=0)
    return LongitudinalCurve(events.record_id, events.variable_id, INTENSITY, grid, out)


class MonotoneCubic:
    """Fritsch-Carlson monotone piecewise-cubic Hermite interpolant.

    Constant extrapolation beyond the first and last knots.
    """

    def __init__(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.ndim != 1 or x.shape != y.shape or len(x) == 0:
            raise ValueError("x and y must be non-empty 1-D arrays of equal length")
        if np.any(np.diff(x) <= 0):
            raise ValueError("x must be strictly increasing")
        self.x = x
        self.y = y
        self.slopes = self._slopes(x, y)

    @staticmethod
    def _slopes(x, y):
        n = len(x)
        m = np.zeros(n)
        if n < 2:
            return m
        h = np.diff(x)
        delta = np.diff(y) / h
        m[0] = delta[0]
        m[-1] = delta[-1]
        same_sign = delta[:-1] * delta[1:] > 0
        m[1:-1] = np.where(same_sign, 0.5 * (delta[:-1] + delta[1:]), 0.0)
        for k in range(n - 1):
            if delta[k] == 0.0:
                m[k] = m[k + 1] = 0.0
                continue
            a = m[k] / delta[k]
            b = m[k + 1] / delta[k]
            r = a * a + b * b
            if r > 9.0:
                tau = 3.0 / math.sqrt(r)
                m[k] = tau * a * delta[k]
                m[k + 1] = tau * b * delta[k]
        return m

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        x, y, m = self.x, self.y, self.slopes
        out = np.empty(t.shape)
        lo = t <= x[0]
        hi = t >= x[-1]
        out[lo] = y[0]
        out[hi] = y[-1]
        mid = ~(lo | hi)
        if np.any(mid):
            tm = t[mid]
            k = np.searchsorted(x, tm, side="right") - 1
            h = x[k + 1] - x[k]
            s = (tm - x[k]) / h
            s2 = s * s
            s3 = s2 * s
            out[mid] = (y[k] + (y[k + 1] - y[k]) * (3.0 * s2 - 2.0 * s3)
                        + h * (m[k] * (s3 - 2.0 * s2 + s) + m[k + 1] * (s3 - s2)))
        return out


def average_duplicates(times, values):
    """Collapse repeated times to one point holding the mean value."""
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    uniq, inverse = np.unique(times, return_inverse=True)
    sums = np.bincount(inverse, weights=values, minlength=len(uniq))
    counts = np.bincount(inverse, minlength=len(uniq))
    return uniq, sums / counts


def interpolate_values(series: ValueSeries, span: RecordSpan, grid: Grid) -> LongitudinalCurve:
    if len(series) == 0:
        raise ValueError(f"empty value series {series.record_id}/{series.variable_id}")
    x, y = average_duplicates(series.times, series.values)
    interp = MonotoneCubic(x, y)
    return LongitudinalCurve(series.record_id, series.variable_id, VALUE, grid,
                             interp(grid.points), interpolant=interp)


def evaluate_curve(curve: LongitudinalCurve, t):
    """Linear interpolation between the grid values bracketing ``t``."""
    grid = curve.grid
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < grid.start) or np.any(t_arr > grid.end) or not np.all(np.isfinite(t_arr)):
        raise ValueError(f"time outside curve grid [{grid.start}, {grid.end}]")
    pts = grid.points
    i = np.clip(np.searchsorted(pts, t_arr, side="right") - 1, 0, grid.count - 2)
    frac = (t_arr - pts[i]) / (pts[i + 1] - pts[i])
    v = curve.values
    out = np.where(frac == 1.0, v[i + 1], v[i] + frac * (v[i + 1] - v[i]))
    return float(out) if np.ndim(t) == 0 else out


def record_curves(events, values, span: RecordSpan, grid: Grid,
                  cfg: IntensityConfig = IntensityConfig()) -> list[LongitudinalCurve]:
    """All curves of one record: intensities for its event series, interpolants for its labs."""
    curves = [estimate_intensity(s, span, grid, cfg) for s in events]
    curves += [interpolate_values(s, span, grid) for s in values if len(s)]
    return curves


def write_curve_dump(path, curves) -> None:
    """One row per curve: ``record_id variable_id kind grid_start grid_end v_0 ... v_G``, tab-separated."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for c in curves:
            head = [c.record_id, c.variable_id, c.kind, repr(float(c.grid.start)), repr(float(c.grid.end))]
            fh.write("\t".join(head + [repr(float(v)) for v in c.values]) + "\n")


def read_curve_dump(path) -> dict[str, list[LongitudinalCurve]]:
    """Curves grouped by record id, in file order."""
    out: dict[str, list[LongitudinalCurve]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 7:
                raise ValueError(f"{path}:{lineno}: truncated curve row")
            rid, vid, kind = parts[:3]
            vals = np.array([float(p) for p in parts[5:]])
            grid = Grid(float(parts[3]), float(parts[4]), len(vals))
            out.setdefault(rid, []).append(LongitudinalCurve(rid, vid, kind, grid, vals))
    return out
