"""Leaky surface: integrates events into a decaying intensity grid.

Every incoming event adds a fixed increment (1.0) to its pixel while the
whole grid decays at ``lam`` intensity units per microsecond, clamped at
zero. Besides the grid itself, each step reports the three signals the
incremental layers downstream need to stay exact:

* which pixels received events,
* the total decay amount of the step (``delta_leak``),
* which pixels were reset to zero by the clamp (their decrease is smaller
  than ``delta_leak``, so they must be recomputed, not decayed, downstream).

Both update modes share one arithmetic: a pixel's value is always
``max(anchor - cast(level_now - level_anchor), 0)`` where the anchor is
its value at its last touch (event or batch start) and levels are the
cumulative decay ``lam * (ts - t_batch_start)`` in float64. ``per_event``
materializes the full grid at every event; ``batched`` materializes once
and replays only the event pixels. The two grids are therefore
bit-identical, clamp-then-event interleavings included.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import TimestampRegression
from .events import EventBatch


@dataclass
class SurfaceUpdate:
    """Per-step signals forwarded to the first network layer."""

    event_mask: np.ndarray       # bool [H, W], pixels that received events
    clamped_mask: np.ndarray     # bool [H, W], pixels reset positive -> 0
    delta_leak: float            # lam * elapsed microseconds of this step
    surface: "LeakySurface" = field(repr=False)

    @property
    def event_coords(self):
        ys, xs = np.nonzero(self.event_mask)
        return {(int(x), int(y)) for x, y in zip(xs, ys)}

    @property
    def clamped_coords(self):
        ys, xs = np.nonzero(self.clamped_mask)
        return {(int(x), int(y)) for x, y in zip(xs, ys)}

    @property
    def changed_mask(self):
        """Pixels whose change is not the uniform decay (events + clamps)."""
        return self.event_mask | self.clamped_mask

    def snapshot(self):
        return self.surface.snapshot()


class LeakySurface:
    """Decaying event accumulator; single writer, layer 0 of a network.

    ``increment`` is fixed at 1.0 for network use (decay rate and increment
    trade off against each other, so only the decay rate is varied); it is
    overridable to exercise that trade-off directly.
    """

    def __init__(self, width, height, lam, dtype=np.float64, increment=1.0):
        self.width = int(width)
        self.height = int(height)
        self.lam = float(lam)
        self.dtype = np.dtype(dtype)
        self.grid = np.zeros((self.height, self.width), dtype=self.dtype)
        self.last_ts = None
        self._one = self.dtype.type(increment)
        # positivity indicator, maintained incrementally: it can only change
        # at event or clamp pixels, which every step reports
        self._rate_cache = np.zeros((self.height, self.width), dtype=self.dtype)
        # persistent single-channel views for layer consumption; the grid
        # array identity never changes, so downstream caches stay valid
        self.values3 = self.grid.reshape(self.height, self.width, 1)
        self.rates3 = self._rate_cache.reshape(self.height, self.width, 1)

    def snapshot(self):
        return self.grid.copy()

    def rates(self):
        """Decay-rate indicator per pixel: 1 where positive, else 0.

        Returned array is a live cache; treat as read-only.
        """
        return self._rate_cache

    def _refresh_rate_cache(self, changed_mask):
        ys, xs = np.nonzero(changed_mask)
        if len(ys):
            self._rate_cache[ys, xs] = (self.grid[ys, xs] > 0).astype(self.dtype)

    def apply(self, batch: EventBatch, mode: str = "batched") -> SurfaceUpdate:
        """Integrate one batch; empty batches decay the grid over their span."""
        if mode not in ("per_event", "batched"):
            raise ValueError(f"unknown mode {mode!r}")
        if len(batch) == 0:
            return self.advance(batch.span_us)
        ts = batch.ts.astype(np.int64)
        if self.last_ts is not None and int(ts[0]) < self.last_ts:
            raise TimestampRegression(
                f"batch starts at {int(ts[0])} before surface clock {self.last_ts}"
            )
        t0 = self.last_ts if self.last_ts is not None else int(ts[0])
        levels = self.lam * (ts - t0).astype(np.float64)
        if mode == "per_event":
            update = self._apply_per_event(batch, levels)
        else:
            update = self._apply_batched(batch, levels)
        self.last_ts = int(ts[-1])
        self._refresh_rate_cache(update.changed_mask)
        return update

    def advance(self, duration_us) -> SurfaceUpdate:
        """Event-free step: pure decay over the given span."""
        leak = self.lam * float(duration_us)
        new = np.maximum(self.grid - float(leak), 0)
        clamped = (self.grid > 0) & (new == 0)
        np.copyto(self.grid, new)
        if self.last_ts is not None:
            self.last_ts = self.last_ts + int(duration_us)
        self._refresh_rate_cache(clamped)
        return SurfaceUpdate(
            event_mask=np.zeros(self.grid.shape, dtype=bool),
            clamped_mask=clamped,
            delta_leak=leak,
            surface=self,
        )

    def _decayed(self, level, anchors, anchor_levels, touched):
        """max(anchor - cast(level - anchor_level), 0) for the whole grid.

        Pixels anchored at level 0 need no correction: subtracting the
        scalar already equals level - 0 in the grid dtype.
        """
        new = np.maximum(anchors - float(level), 0)
        if touched:
            tys = np.fromiter((t[0] for t in touched), dtype=np.intp, count=len(touched))
            txs = np.fromiter((t[1] for t in touched), dtype=np.intp, count=len(touched))
            amounts = (level - anchor_levels[tys, txs]).astype(self.dtype)
            new[tys, txs] = np.maximum(anchors[tys, txs] - amounts, 0)
        return new

    def _apply_per_event(self, batch, levels):
        anchors = self.grid.copy()
        anchor_levels = np.zeros(self.grid.shape, dtype=np.float64)
        touched = set()
        grid = self.grid
        event_mask = np.zeros(self.grid.shape, dtype=bool)
        clamped_mask = np.zeros(self.grid.shape, dtype=bool)
        for x, y, level in zip(batch.xs, batch.ys, levels):
            x = int(x)
            y = int(y)
            new = self._decayed(level, anchors, anchor_levels, touched)
            clamped_mask |= (grid > 0) & (new == 0)
            value = new[y, x] + self._one
            new[y, x] = value
            anchors[y, x] = value
            anchor_levels[y, x] = level
            touched.add((y, x))
            event_mask[y, x] = True
            grid = new
        np.copyto(self.grid, grid)
        return SurfaceUpdate(event_mask, clamped_mask, float(levels[-1]), self)

    def _apply_batched(self, batch, levels):
        anchors = self.grid.copy()
        anchor_levels = np.zeros(self.grid.shape, dtype=np.float64)
        touched = set()
        event_mask = np.zeros(self.grid.shape, dtype=bool)
        clamped_mask = np.zeros(self.grid.shape, dtype=bool)
        for x, y, level in zip(batch.xs, batch.ys, levels):
            x = int(x)
            y = int(y)
            amount = self.dtype.type(level - anchor_levels[y, x])
            value = anchors[y, x] - amount
            if value < 0:
                value = self.dtype.type(0)
            if anchors[y, x] > 0 and value == 0:
                clamped_mask[y, x] = True
            value = value + self._one
            anchors[y, x] = value
            anchor_levels[y, x] = level
            touched.add((y, x))
            event_mask[y, x] = True
        final_level = float(levels[-1])
        new = self._decayed(final_level, anchors, anchor_levels, touched)
        clamped_mask |= (anchors > 0) & (new == 0)
        np.copyto(self.grid, new)
        return SurfaceUpdate(event_mask, clamped_mask, final_level, self)
