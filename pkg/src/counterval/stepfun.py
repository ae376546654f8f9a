"""Right-continuous step functions on the time axis.

Shared primitive for censoring-survival curves, Kaplan-Meier curves,
Breslow baseline hazards and Aalen cumulative coefficients.
"""

import numpy as np

__all__ = ["StepFunction"]


class StepFunction:
    """A right-continuous step function with jumps at sorted ``times``.

    ``f(t)`` equals ``values[j]`` for the largest ``j`` with
    ``times[j] <= t``, and ``init`` for ``t`` before the first jump.
    The left-hand limit ``f(t-)`` is available through :meth:`left`.

    Parameters
    ----------
    times : array-like, shape (m,)
        Jump locations, nondecreasing.
    values : array-like, shape (m,)
        Function value at and after each jump.
    init : float, default 1.0
        Value on ``[0, times[0])``.
    """

    __slots__ = ("times", "values", "init")

    def __init__(self, times, values, init=1.0):
        times = np.atleast_1d(np.asarray(times, dtype=float))
        values = np.atleast_1d(np.asarray(values, dtype=float))
        if times.shape != values.shape:
            raise ValueError("times and values must have the same shape")
        if times.size > 1 and np.any(np.diff(times) < 0):
            raise ValueError("times must be nondecreasing")
        self.times = times
        self.values = values
        self.init = float(init)

    @classmethod
    def constant(cls, value=1.0):
        """A step function that is ``value`` everywhere."""
        return cls(np.empty(0), np.empty(0), init=value)

    def _eval(self, t, side):
        t = np.asarray(t, dtype=float)
        if self.values.size == 0:
            out = np.full(t.shape, self.init)
            return float(out) if out.ndim == 0 else out
        idx = np.searchsorted(self.times, t, side=side) - 1
        out = np.where(idx >= 0, self.values[np.clip(idx, 0, None)], self.init)
        if out.ndim == 0:
            return float(out)
        return out

    def __call__(self, t):
        """Value at ``t`` (right-continuous)."""
        return self._eval(t, side="right")

    def left(self, t):
        """Left-hand limit at ``t``; equals ``init`` for ``t <= times[0]``."""
        return self._eval(t, side="left")

    @property
    def final_value(self):
        return self.values[-1] if self.values.size else self.init

    def to_dict(self):
        return {
            "times": self.times.tolist(),
            "values": self.values.tolist(),
            "init": self.init,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["times"]), np.asarray(d["values"]), init=d["init"])

    def __repr__(self):
        return f"StepFunction({self.times.size} jumps, init={self.init})"
