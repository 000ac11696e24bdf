"""Event-driven 2-D convolution with persistent per-layer state.

Instead of recomputing its output map every step, the layer keeps three
grids between steps:

``preact``       pre-activation values (conv sum + bias)
``slopes``       the activation segment slope currently applied per unit
``preact_rate``  how fast each pre-activation decays per unit of surface
                 leak: the kernel applied to the upstream decay rates

A step then costs one vectorized decay update on the full grid plus exact
local recomputation only where the upstream layer reported changes. A
unit whose decay update pushes it across the activation breakpoint is
itself reported downstream as a change, because from that point on its
post-activation no longer evolves at the rate downstream layers assumed.

Pre-activation (not post-activation) is stored deliberately: the decay
update of a linear sum is exact regardless of which segment the unit's
own activation sits on, so a local segment flip needs no recomputation
here, only notification downstream. Post-activation values and rates are
derived views (slope * preact, slope * preact_rate); the rates view is
maintained incrementally since it only changes at recomputed or flipped
units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .activations import PiecewiseLinear
from .errors import CoordinateOutOfBounds, DimensionMismatch, StaleState


@dataclass
class LayerDelta:
    """Inter-layer message: where to recompute, how much uniform decay."""

    changed_mask: np.ndarray   # bool [H, W] of the producing layer's output
    delta_leak: float
    values: np.ndarray = field(repr=False)   # [H, W, C] post-activation
    rates: np.ndarray = field(repr=False)    # [H, W, C] decay rate per unit leak

    @property
    def changed_coords(self):
        ys, xs = np.nonzero(self.changed_mask)
        return {(int(x), int(y)) for x, y in zip(xs, ys)}


class ConvKernel:
    """Weights [out_c, in_c, kh, kw], bias [out_c], stride, padding."""

    def __init__(self, weights, bias, stride=1, padding="same_zero"):
        weights = np.asarray(weights)
        if weights.ndim != 4:
            raise DimensionMismatch(f"weights must be 4-D, got shape {weights.shape}")
        bias = np.asarray(bias)
        if bias.shape != (weights.shape[0],):
            raise DimensionMismatch(
                f"bias shape {bias.shape} does not match {weights.shape[0]} output channels"
            )
        if stride < 1 or weights.shape[2] < 1 or weights.shape[3] < 1:
            raise DimensionMismatch("kernel dims and stride must be >= 1")
        if padding not in ("same_zero", "valid"):
            raise ValueError(f"unknown padding {padding!r}")
        self.weights = weights
        self.bias = bias
        self.stride = int(stride)
        self.padding = padding

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def kh(self):
        return self.weights.shape[2]

    @property
    def kw(self):
        return self.weights.shape[3]

    def astype(self, dtype):
        return ConvKernel(
            self.weights.astype(dtype), self.bias.astype(dtype), self.stride, self.padding
        )


def conv_geometry(in_size, kernel, stride, padding):
    """(out_size, pad_begin) for one spatial dimension."""
    if padding == "same_zero":
        out = -(-in_size // stride)  # ceil
        pad_total = max((out - 1) * stride + kernel - in_size, 0)
        return out, pad_total // 2
    if in_size < kernel:
        raise DimensionMismatch(f"input {in_size} smaller than kernel {kernel} (valid padding)")
    return (in_size - kernel) // stride + 1, 0


def dense_conv(values, kernel: ConvKernel, with_bias=True):
    """Full convolution of a [H, W, C] map; returns [out_h, out_w, out_c]."""
    h, w, ci = values.shape
    if ci != kernel.in_channels:
        raise DimensionMismatch(f"{ci} input channels, kernel expects {kernel.in_channels}")
    out_h, pbh = conv_geometry(h, kernel.kh, kernel.stride, kernel.padding)
    out_w, pbw = conv_geometry(w, kernel.kw, kernel.stride, kernel.padding)
    need_h = (out_h - 1) * kernel.stride + kernel.kh
    need_w = (out_w - 1) * kernel.stride + kernel.kw
    if pbh or pbw or need_h > h or need_w > w:
        padded = np.zeros((max(need_h, h + pbh), max(need_w, w + pbw), ci), dtype=values.dtype)
        padded[pbh:pbh + h, pbw:pbw + w] = values
    else:
        padded = values
    win = np.lib.stride_tricks.sliding_window_view(padded, (kernel.kh, kernel.kw), axis=(0, 1))
    win = win[: (out_h - 1) * kernel.stride + 1 : kernel.stride,
              : (out_w - 1) * kernel.stride + 1 : kernel.stride]
    # win: [out_h, out_w, Ci, kh, kw] x weights [Co, Ci, kh, kw] -> [out_h, out_w, Co]
    out = np.tensordot(win, kernel.weights, axes=([2, 3, 4], [1, 2, 3]))
    if with_bias:
        out = out + kernel.bias
    return out


class EventConv2D:
    """Stateful incremental conv layer; single writer per step."""

    def __init__(self, kernel: ConvKernel, activation: PiecewiseLinear, in_shape):
        hi, wi, ci = in_shape
        if ci != kernel.in_channels:
            raise DimensionMismatch(
                f"input has {ci} channels, kernel expects {kernel.in_channels}"
            )
        self.kernel = kernel
        self.act = activation
        self.in_shape = (int(hi), int(wi), int(ci))
        self.out_h, self.pbh = conv_geometry(hi, kernel.kh, kernel.stride, kernel.padding)
        self.out_w, self.pbw = conv_geometry(wi, kernel.kw, kernel.stride, kernel.padding)
        self.dtype = kernel.weights.dtype
        self.preact = None
        self.slopes = None
        self.preact_rate = None
        self._rates_view = None
        self._is_identity = activation.kind == "identity"
        # weights reordered for patch products, contraction order (Ci, kh, kw)
        # to match dense_conv bit-for-bit: [Ci*kh*kw, Co]
        self._w_patch = np.ascontiguousarray(
            kernel.weights.transpose(1, 2, 3, 0)
        ).reshape(-1, kernel.out_channels)
        self._kh_off = np.arange(kernel.kh)[None, :, None]
        self._kw_off = np.arange(kernel.kw)[None, None, :]
        hi_, wi_ = int(hi), int(wi)
        self._no_oob = (
            self.pbh == 0 and self.pbw == 0
            and (self.out_h - 1) * kernel.stride + kernel.kh <= hi_
            and (self.out_w - 1) * kernel.stride + kernel.kw <= wi_
        )

    @property
    def out_shape(self):
        return (self.out_h, self.out_w, self.kernel.out_channels)

    def init_state(self, values_up, rates_up):
        """Full inference over the upstream maps (done once, on blank input)."""
        if values_up.shape != self.in_shape:
            raise DimensionMismatch(
                f"upstream shape {values_up.shape}, layer expects {self.in_shape}"
            )
        self.preact = dense_conv(values_up, self.kernel)
        self.slopes = self.act.slope_map(self.preact)
        self.preact_rate = dense_conv(rates_up, self.kernel, with_bias=False)
        self._rates_view = self.preact_rate if self._is_identity \
            else self.slopes * self.preact_rate
        self._tmp = np.empty_like(self.preact)
        self._values_out = None if self._is_identity else np.empty_like(self.preact)
        self._pos = self.preact > 0
        self._pos_slope = self.dtype.type(self.act.pos_slope)
        self._neg_slope = self.dtype.type(self.act.neg_slope)

    def values(self):
        """Post-activation output map (derived view)."""
        if self._is_identity:
            return self.preact
        return np.multiply(self.slopes, self.preact, out=self._values_out)

    def rates(self):
        """Decay rates this layer exposes downstream (slope-scaled)."""
        return self._rates_view

    def _gather(self, src, flat, ok):
        """Receptive-field patches [n, kh, kw, Ci] via flat row-major indices.

        Out-of-range (padding) taps contribute zero, via clip + mask.
        """
        patches = src.reshape(-1, self.in_shape[2])[flat]
        if ok is not None:
            patches *= ok[..., None]
        return patches

    def _patch_indices(self, ays, axs):
        """Flat [n, kh, kw] input indices plus a validity mask (None if all valid)."""
        hi, wi, _ = self.in_shape
        rows = ays[:, None, None] * self.kernel.stride + self._kh_off - self.pbh  # [n,kh,1]
        cols = axs[:, None, None] * self.kernel.stride + self._kw_off - self.pbw  # [n,1,kw]
        if self._no_oob:
            return rows * wi + cols, None
        ok = (rows >= 0) & (rows < hi) & (cols >= 0) & (cols < wi)  # [n, kh, kw]
        flat = np.clip(rows, 0, hi - 1) * wi + np.clip(cols, 0, wi - 1)
        return flat, ok

    def _patch_product(self, patches):
        # [n, kh, kw, Ci] -> [n, Ci*kh*kw] @ [Ci*kh*kw, Co], same contraction
        # order as dense_conv so recomputed entries are bit-identical
        n = patches.shape[0]
        return patches.transpose(0, 3, 1, 2).reshape(n, -1) @ self._w_patch

    def _affected_outputs(self, changed_in):
        """Output coords whose receptive field contains a changed input coord."""
        mask = np.zeros((self.out_h, self.out_w), dtype=bool)
        ys, xs = np.nonzero(changed_in)
        if len(ys) == 0:
            return mask
        s = self.kernel.stride
        if len(ys) <= 4:
            for y, x in zip(ys.tolist(), xs.tolist()):
                for dy in range(self.kernel.kh):
                    oy = y + self.pbh - dy
                    if oy < 0 or oy % s:
                        continue
                    oy //= s
                    if oy >= self.out_h:
                        continue
                    for dx in range(self.kernel.kw):
                        ox = x + self.pbw - dx
                        if ox < 0 or ox % s:
                            continue
                        ox //= s
                        if ox < self.out_w:
                            mask[oy, ox] = True
            return mask
        oy = ys[:, None] + (self.pbh - np.arange(self.kernel.kh))[None, :]  # [n, kh]
        ox = xs[:, None] + (self.pbw - np.arange(self.kernel.kw))[None, :]  # [n, kw]
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

    def refresh_rates(self, coords, rates_up):
        """Recompute the decay rate at the given output (y, x) coords."""
        ays = np.asarray([c[0] for c in coords], dtype=np.intp)
        axs = np.asarray([c[1] for c in coords], dtype=np.intp)
        if len(ays) == 0:
            return
        if (
            ays.min() < 0 or ays.max() >= self.out_h
            or axs.min() < 0 or axs.max() >= self.out_w
        ):
            raise CoordinateOutOfBounds("refresh coordinate outside the output grid")
        flat, ok = self._patch_indices(ays, axs)
        self.preact_rate[ays, axs] = self._patch_product(self._gather(rates_up, flat, ok))
        self._refresh_rates_view(ays, axs)

    def _refresh_rates_view(self, ays, axs):
        if not self._is_identity:
            self._rates_view[ays, axs] = self.slopes[ays, axs] * self.preact_rate[ays, axs]

    def apply(self, incoming: LayerDelta) -> LayerDelta:
        """One incremental step; returns this layer's delta for downstream."""
        if incoming.values.shape != self.in_shape:
            raise StaleState(
                f"incoming delta for shape {incoming.values.shape}, "
                f"layer expects {self.in_shape}"
            )
        affected = self._affected_outputs(incoming.changed_mask)
        ays, axs = np.nonzero(affected)
        n_affected = len(ays)
        d = incoming.delta_leak
        n_flips = 0
        flipped = None
        if d != 0.0:
            np.multiply(self.preact_rate, self.dtype.type(d), out=self._tmp)
            np.subtract(self.preact, self._tmp, out=self.preact)
            if not self._is_identity:
                new_pos = self.preact > 0
                diff = new_pos != self._pos
                flipped = diff.any(axis=2)
                if n_affected:
                    flipped &= ~affected
                n_flips = int(np.count_nonzero(flipped))
                self._pos = new_pos
                flat_flips = np.flatnonzero(diff)
                if len(flat_flips):
                    sl = self.slopes.reshape(-1)
                    sl[flat_flips] = np.where(
                        new_pos.reshape(-1)[flat_flips], self._pos_slope, self._neg_slope
                    )
                    self._rates_view.reshape(-1)[flat_flips] = (
                        sl[flat_flips] * self.preact_rate.reshape(-1)[flat_flips]
                    )

        if n_affected:
            co = self.kernel.out_channels
            flat_out = ays * self.out_w + axs
            flat, ok = self._patch_indices(ays, axs)
            patches = self._gather(incoming.values, flat, ok)
            pre2 = self.preact.reshape(-1, co)
            pre2[flat_out] = self._patch_product(patches) + self.kernel.bias
            self.preact_rate.reshape(-1, co)[flat_out] = self._patch_product(
                self._gather(incoming.rates, flat, ok)
            )
            if not self._is_identity:
                pos = pre2[flat_out] > 0
                self._pos.reshape(-1, co)[flat_out] = pos
                sl = np.where(pos, self._pos_slope, self._neg_slope)
                self.slopes.reshape(-1, co)[flat_out] = sl
                self._rates_view.reshape(-1, co)[flat_out] = (
                    sl * self.preact_rate.reshape(-1, co)[flat_out]
                )

        self.last_recompute_count = n_affected
        self.last_flip_count = n_flips
        if n_flips:
            changed_out = affected | flipped
        else:
            changed_out = affected
        return LayerDelta(
            changed_mask=changed_out,
            delta_leak=d,
            values=self.values(),
            rates=self._rates_view,
        )
