"""From a fluid appointment profile to concrete appointment times."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fluid import Grid


class DegenerateDayError(ValueError):
    """A day whose scheduled times span no interval cannot be normalized."""


@dataclass(frozen=True)
class Schedule:
    """``m`` appointment times, sorted, inside ``[0, horizon]``."""

    times: np.ndarray
    horizon: float = 1.0

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).reshape(-1)
        if t.size:
            if not np.all(np.isfinite(t)):
                raise ValueError("appointment times must be finite")
            if np.any(np.diff(t) < 0):
                raise ValueError("appointment times must be nondecreasing")
            if t[0] < 0 or t[-1] > self.horizon:
                raise ValueError("appointment times must lie in [0, horizon]")
        object.__setattr__(self, "times", t)

    @property
    def m(self) -> int:
        return int(self.times.size)

    def profile(self, t) -> np.ndarray:
        """Fraction of appointments booked at or before each time in ``t``."""
        if self.m == 0:
            return np.zeros(np.shape(t))
        return np.searchsorted(self.times, t, side="right") / self.m

    def write(self, path) -> None:
        """Two columns: zero-based patient index and appointment time."""
        with open(path, "w") as fh:
            fh.write(f"# horizon {float(self.horizon)!r}\n")
            for i, t in enumerate(self.times):
                fh.write(f"{i} {float(t)!r}\n")

    @classmethod
    def read(cls, path) -> "Schedule":
        horizon = 1.0
        times = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line.startswith("# horizon"):
                    horizon = float(line.split()[2])
                elif line and not line.startswith("#"):
                    _, t = line.split()
                    times.append(float(t))
        return cls(np.array(times), horizon)


def extract_schedule(control, grid: Grid, scale: float = 1.0) -> Schedule:
    """Appointment times from a grid control.

    The count is ``floor(scale * total mass)``.  Patient ``j`` (1-based) is
    booked at the first node where the cumulative profile, including that
    node's own mass, reaches ``j/m`` of the total.
    """
    if not scale > 0:
        raise ValueError("scale must be positive")
    a = grid.check(control)
    if np.any(a < 0):
        raise ValueError("control mass must be nonnegative")
    total = float(a.sum())
    # the epsilon keeps an exact count like 100 from flooring to 99
    m = int(math.floor(scale * total + 1e-9)) if total > 0 else 0
    if m == 0:
        return Schedule(np.zeros(0), grid.horizon)
    cum = np.cumsum(a) / total
    thresholds = np.arange(1, m + 1) / m
    idx = np.searchsorted(cum, thresholds * (1 - 1e-12), side="left")
    # the last quantile lands on the last node carrying mass
    last = int(np.flatnonzero(a)[-1])
    idx = np.minimum(idx, last)
    return Schedule(grid.nodes[idx], grid.horizon)


def normalize_day(scheduled, arrived):
    """Map a day's schedule onto [0, 1] and rescale unpunctualities alike.

    Returns ``(times, unpunctualities)`` in the input order.
    """
    s = np.asarray(scheduled, dtype=float)
    a = np.asarray(arrived, dtype=float)
    if s.shape != a.shape or s.ndim != 1:
        raise ValueError("scheduled and arrived must be equal-length 1-d sequences")
    if s.size == 0:
        raise DegenerateDayError("empty day")
    lo, hi = float(s.min()), float(s.max())
    span = hi - lo
    if not span > 0:
        raise DegenerateDayError("all scheduled times coincide")
    return (s - lo) / span, (a - s) / span


__all__ = ["DegenerateDayError", "Schedule", "extract_schedule", "normalize_day"]
