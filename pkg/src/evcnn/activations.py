"""Piecewise-linear activation functions with explicit segment bookkeeping.

The incremental layer update needs to know not just g(x) but which linear
segment x falls on, because a feature's decay rate is scaled by the slope
of its current segment. All supported activations are continuous, have at
most one breakpoint (at 0) and zero intercepts, so g(x) = slope(x) * x.

Boundary convention: x == 0 belongs to the non-positive segment, so the
relu slope at exactly 0 is 0. The same tie-break is used everywhere
segment logic appears.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteInput

_KINDS = ("identity", "relu", "leaky_relu")


class PiecewiseLinear:
    """identity, relu, or leaky_relu(negative_slope); default slope 0.1."""

    def __init__(self, kind: str, negative_slope: float = 0.1):
        if kind not in _KINDS:
            raise ValueError(f"unknown activation kind {kind!r}")
        self.kind = kind
        if kind == "identity":
            self.pos_slope = 1.0
            self.neg_slope = 1.0
        elif kind == "relu":
            self.pos_slope = 1.0
            self.neg_slope = 0.0
        else:
            self.pos_slope = 1.0
            self.neg_slope = float(negative_slope)

    def __repr__(self):
        if self.kind == "leaky_relu":
            return f"PiecewiseLinear('leaky_relu', {self.neg_slope})"
        return f"PiecewiseLinear({self.kind!r})"

    def __eq__(self, other):
        if not isinstance(other, PiecewiseLinear):
            return NotImplemented
        return self.kind == other.kind and self.neg_slope == other.neg_slope

    def apply(self, x):
        """g(x), elementwise; rejects non-finite input."""
        x = np.asarray(x)
        if not np.all(np.isfinite(x)):
            raise NonFiniteInput("activation input must be finite")
        return self.slope_map(x) * x

    def slope_map(self, x):
        """Slope of the segment each element currently sits on."""
        x = np.asarray(x)
        if self.kind == "identity":
            return np.ones_like(x)
        return np.where(x > 0, x.dtype.type(self.pos_slope), x.dtype.type(self.neg_slope))

    def segment_of(self, x):
        """(segment id, slope) for a scalar; id 0 = non-positive, 1 = positive."""
        if not np.isfinite(x):
            raise NonFiniteInput("activation input must be finite")
        if self.kind == "identity":
            return 0, 1.0
        if x > 0:
            return 1, self.pos_slope
        return 0, self.neg_slope

    @classmethod
    def from_config(cls, spec):
        """Build from a config fragment: a kind string or {'kind':..., 'negative_slope':...}."""
        if isinstance(spec, str):
            return cls(spec)
        return cls(spec["kind"], spec.get("negative_slope", 0.1))
