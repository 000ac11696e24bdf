"""Event-driven max pooling with a persistent argmax index per field.

The layer stores, for every receptive field and channel, where its
maximum sits. Output values and decay rates are never computed here: they
are fetched from the upstream maps at the stored positions. An index only
needs recomputing when

* an upstream change lands inside the field, or
* the field is not *stable*: its current maximum does not also have the
  smallest decay rate in the field, so uniform decay could reorder it.

Stable untouched fields are skipped entirely: the slowest-decaying
maximum stays the maximum under pure decay. Ties in value are broken
toward the smallest row-major in-window index, here and in the dense
reference, so index comparisons are deterministic.

Two equivalent recheck strategies are used depending on how much of the
grid needs rechecking: per-coordinate gathers when the set is small (the
usual case on sparse scenes) and a whole-grid windowed argmax adopted
only at recheck positions when it is large.
"""

from __future__ import annotations

import numpy as np

from .econv import LayerDelta
from .errors import DimensionMismatch, StaleState


class EventMaxPool2D:
    """Stateful incremental max-pool; non-divisible inputs are valid-cropped."""

    def __init__(self, pool_h=2, pool_w=2, stride=2, in_shape=None):
        if in_shape is None:
            raise DimensionMismatch("in_shape is required")
        hi, wi, c = in_shape
        if hi < pool_h or wi < pool_w:
            raise DimensionMismatch(f"input {hi}x{wi} smaller than pool {pool_h}x{pool_w}")
        self.ph = int(pool_h)
        self.pw = int(pool_w)
        self.s = int(stride)
        self.in_shape = (int(hi), int(wi), int(c))
        self.out_h = (hi - self.ph) // self.s + 1
        self.out_w = (wi - self.pw) // self.s + 1
        self.channels = int(c)
        self.indices = None   # [out_h, out_w, C] flat in-window index (dy*pw + dx)
        self.stable = None    # [out_h, out_w, C] argmax also has the min decay rate
        self._row_base = (np.arange(self.out_h) * self.s)[:, None, None]
        self._col_base = (np.arange(self.out_w) * self.s)[None, :, None]
        self._chan_base = np.broadcast_to(
            np.arange(c)[None, None, :], (self.out_h, self.out_w, c)
        )
        self._ph_off = np.arange(self.ph)[None, :, None]
        self._pw_off = np.arange(self.pw)[None, None, :]
        self._flat_fetch = None  # flat indices into a raveled [Hi, Wi, C] map
        self._rates_out = None   # cached fetched rates (change only at rechecks)
        self._n_windows = self.out_h * self.out_w * c
        self._win_elems = self.ph * self.pw
        # raveled-offset layout of one window, row-major to match argmax ties
        self._win_flat_off = (
            (np.arange(self.ph)[:, None] * wi + np.arange(self.pw)[None, :]) * c
        ).reshape(-1)

    @property
    def out_shape(self):
        return (self.out_h, self.out_w, self.channels)

    def _window_view(self, src):
        win = np.lib.stride_tricks.sliding_window_view(src, (self.ph, self.pw), axis=(0, 1))
        return win[: (self.out_h - 1) * self.s + 1 : self.s,
                   : (self.out_w - 1) * self.s + 1 : self.s]  # [Ho, Wo, C, ph, pw]

    def _windows_flat(self, src):
        return self._window_view(src).reshape(
            self.out_h, self.out_w, self.channels, self._win_elems
        )

    def _refresh_fetch_all(self):
        rows = self._row_base + self.indices // self.pw
        cols = self._col_base + self.indices % self.pw
        _, wi, c = self.in_shape
        self._flat_fetch = (rows * wi + cols) * c + self._chan_base

    def init_state(self, values_up, rates_up):
        """Dense argmax of every field plus the stability flags."""
        if values_up.shape != self.in_shape:
            raise DimensionMismatch(
                f"upstream shape {values_up.shape}, pool expects {self.in_shape}"
            )
        flat_v = self._windows_flat(values_up)
        self.indices = flat_v.argmax(axis=3)
        flat_r = self._windows_flat(rates_up)
        rate_at = np.take_along_axis(flat_r, self.indices[..., None], axis=3)[..., 0]
        self.stable = rate_at == flat_r.min(axis=3)
        self._refresh_fetch_all()
        self._rates_out = self.fetch(rates_up)

    def fetch(self, src):
        return src.reshape(-1)[self._flat_fetch]

    def values(self, values_up):
        """Output map by fetching upstream at the stored indices."""
        return self.fetch(values_up)

    def rates(self):
        """Fetched decay rates (live cache; treat as read-only)."""
        return self._rates_out

    def _touched_fields(self, changed_in):
        mask = np.zeros((self.out_h, self.out_w), dtype=bool)
        ys, xs = np.nonzero(changed_in)
        if len(ys) == 0:
            return mask
        if len(ys) <= 4:
            s = self.s
            for y, x in zip(ys.tolist(), xs.tolist()):
                for dy in range(self.ph):
                    oy = y - dy
                    if oy < 0 or oy % s:
                        continue
                    oy //= s
                    if oy >= self.out_h:
                        continue
                    for dx in range(self.pw):
                        ox = x - dx
                        if ox < 0 or ox % s:
                            continue
                        ox //= s
                        if ox < self.out_w:
                            mask[oy, ox] = True
            return mask
        s = self.s
        oy = ys[:, None] - np.arange(self.ph)[None, :]  # [n, ph]
        ox = xs[:, None] - np.arange(self.pw)[None, :]  # [n, pw]
        if s > 1:
            oy_ok = (oy >= 0) & (oy % s == 0)
            ox_ok = (ox >= 0) & (ox % s == 0)
            oy, ox = oy // s, ox // s
        else:
            oy_ok = oy >= 0
            ox_ok = ox >= 0
        oy_ok &= oy < self.out_h
        ox_ok &= ox < self.out_w
        ok = oy_ok[:, :, None] & ox_ok[:, None, :]
        flat = np.clip(oy, 0, self.out_h - 1)[:, :, None] * self.out_w \
            + np.clip(ox, 0, self.out_w - 1)[:, None, :]
        mask.ravel()[flat[ok]] = True
        return mask

    def apply(self, incoming: LayerDelta) -> LayerDelta:
        """Recheck touched and unstable fields; forward index/value changes."""
        if incoming.values.shape != self.in_shape:
            raise StaleState(
                f"incoming delta for shape {incoming.values.shape}, "
                f"pool expects {self.in_shape}"
            )
        touched = self._touched_fields(incoming.changed_mask)
        recheck = touched[..., None] | ~self.stable
        rflat = np.flatnonzero(recheck)  # row-major == (ry*out_w + rx)*C + rc
        n_recheck = len(rflat)
        emit = np.zeros((self.out_h, self.out_w), dtype=bool)
        if n_recheck:
            if n_recheck * 3 < self._n_windows:
                self._recheck_gathered(incoming, rflat, emit)
            else:
                self._recheck_full(incoming, recheck, rflat, emit)
        self.last_recompute_count = n_recheck
        self.last_flip_count = 0
        return LayerDelta(
            changed_mask=emit,
            delta_leak=incoming.delta_leak,
            values=self.fetch(incoming.values),
            rates=self._rates_out,
        )

    def _recheck_gathered(self, incoming, rflat, emit):
        _, wi, c = self.in_shape
        rcs = rflat % c
        spatial = rflat // c
        rxs = spatial % self.out_w
        rys = spatial // self.out_w
        base = ((rys * self.s) * wi + rxs * self.s) * c + rcs
        window = base[:, None] + self._win_flat_off[None, :]  # [n, win_elems]
        vals = incoming.values.reshape(-1)[window]
        new_idx = vals.argmax(axis=1)
        index_changed = new_idx != self.indices.reshape(-1)[rflat]
        fy = rys * self.s + new_idx // self.pw
        fx = rxs * self.s + new_idx % self.pw
        fetch_changed = incoming.changed_mask.reshape(-1)[fy * wi + fx]
        changed = index_changed | fetch_changed
        emit.reshape(-1)[spatial[changed]] = True
        self.indices.reshape(-1)[rflat] = new_idx
        rvals = incoming.rates.reshape(-1)[window]
        rate_at = np.take_along_axis(rvals, new_idx[:, None], 1)[:, 0]
        self.stable.reshape(-1)[rflat] = rate_at == rvals.min(axis=1)
        if index_changed.any():
            self._flat_fetch.reshape(-1)[rflat[index_changed]] = (
                fy[index_changed] * wi + fx[index_changed]
            ) * c + rcs[index_changed]
        # outside the recheck set the fetch target and its rate are
        # untouched, so refreshing the cache here keeps it exact
        self._rates_out.reshape(-1)[rflat] = rate_at

    def _recheck_full(self, incoming, recheck, rflat, emit):
        _, wi, c = self.in_shape
        fresh = self._windows_flat(incoming.values).argmax(axis=3)
        new_indices = np.where(recheck, fresh, self.indices)
        idx_changed3 = new_indices != self.indices
        self.indices = new_indices
        if idx_changed3.any():
            chf = np.flatnonzero(idx_changed3)
            ocs = chf % c
            osp = chf // c
            rows = (osp // self.out_w) * self.s + new_indices.reshape(-1)[chf] // self.pw
            cols = (osp % self.out_w) * self.s + new_indices.reshape(-1)[chf] % self.pw
            self._flat_fetch.reshape(-1)[chf] = (rows * wi + cols) * c + ocs
        flat_r = self._windows_flat(incoming.rates)
        rate_at = np.take_along_axis(flat_r, new_indices[..., None], axis=3)[..., 0]
        self.stable = np.where(recheck, rate_at == flat_r.min(axis=3), self.stable)
        self._rates_out.reshape(-1)[rflat] = rate_at.reshape(-1)[rflat]
        fetch_changed3 = incoming.changed_mask.reshape(-1)[
            self._flat_fetch // self.in_shape[2]
        ] & recheck
        np.logical_or.reduce(idx_changed3 | fetch_changed3, axis=2, out=emit)
