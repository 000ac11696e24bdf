"""Layer composition, weight container I/O, the dense reference pass, and
the event-vs-dense equivalence checker.

A network is: leaky surface -> alternating conv / max-pool layers -> a
final stack of 1x1 convs whose output grid is the detection head tensor
[rows, cols, boxes*5 + classes]. The event path updates persistent layer
state per batch; ``dense_forward`` recomputes everything from a surface
snapshot and is the ground truth the event path must match.

Weight container: ``<prefix>.manifest.json`` listing tensors (name, shape,
byte offset, length) plus ``<prefix>.bin`` holding the concatenated
little-endian float32 payloads, row-major, in manifest order. Conv layer
N (its position in the config layer list) owns ``layerN.weight``
[out, in, kh, kw] and ``layerN.bias`` [out].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .activations import PiecewiseLinear
from .econv import ConvKernel, EventConv2D, LayerDelta, conv_geometry, dense_conv
from .emaxpool import EventMaxPool2D
from .errors import MissingTensor, ShapeMismatch
from .events import EventBatch, EventStream, window_events
from .surface import LeakySurface


@dataclass
class ConvSpec:
    out_channels: int
    kernel: tuple  # (kh, kw)
    stride: int = 1
    padding: str = "same_zero"
    activation: PiecewiseLinear = field(default_factory=lambda: PiecewiseLinear("relu"))


@dataclass
class PoolSpec:
    size: tuple = (2, 2)  # (ph, pw)
    stride: int = 2


@dataclass
class HeadSpec:
    rows: int
    cols: int
    boxes: int
    classes: int

    @property
    def channels(self):
        return self.boxes * 5 + self.classes


@dataclass
class NetworkConfig:
    width: int
    height: int
    lam: float
    layers: list
    head: HeadSpec
    arithmetic: str = "f64"
    mode: str = "batched"
    window_us: int = 10_000

    @property
    def dtype(self):
        return np.float32 if self.arithmetic == "f32" else np.float64

    def layer_shapes(self):
        """Output (h, w, c) after each layer; validates the chain."""
        h, w, c = self.height, self.width, 1
        shapes = []
        for spec in self.layers:
            if isinstance(spec, ConvSpec):
                h, _ = conv_geometry(h, spec.kernel[0], spec.stride, spec.padding)
                w, _ = conv_geometry(w, spec.kernel[1], spec.stride, spec.padding)
                c = spec.out_channels
            else:
                if h < spec.size[0] or w < spec.size[1]:
                    raise ShapeMismatch(f"pool {spec.size} larger than input {h}x{w}")
                h = (h - spec.size[0]) // spec.stride + 1
                w = (w - spec.size[1]) // spec.stride + 1
            shapes.append((h, w, c))
        return shapes

    def validate(self):
        if self.arithmetic not in ("f32", "f64"):
            raise ShapeMismatch(f"arithmetic must be f32 or f64, got {self.arithmetic!r}")
        if self.mode not in ("per_event", "batched"):
            raise ShapeMismatch(f"mode must be per_event or batched, got {self.mode!r}")
        shapes = self.layer_shapes()
        if not shapes:
            raise ShapeMismatch("network needs at least one layer")
        h, w, c = shapes[-1]
        if (h, w) != (self.head.rows, self.head.cols):
            raise ShapeMismatch(
                f"final grid {h}x{w} does not match head {self.head.rows}x{self.head.cols}"
            )
        if c != self.head.channels:
            raise ShapeMismatch(
                f"final channels {c} != boxes*5+classes = {self.head.channels}"
            )

    def to_json(self):
        layers = []
        for spec in self.layers:
            if isinstance(spec, ConvSpec):
                entry = {
                    "type": "conv",
                    "out_channels": spec.out_channels,
                    "kernel": list(spec.kernel),
                    "stride": spec.stride,
                    "padding": spec.padding,
                    "activation": spec.activation.kind,
                }
                if spec.activation.kind == "leaky_relu":
                    entry["negative_slope"] = spec.activation.neg_slope
            else:
                entry = {"type": "pool", "size": list(spec.size), "stride": spec.stride}
            layers.append(entry)
        return json.dumps(
            {
                "input": {"w": self.width, "h": self.height},
                "lambda": self.lam,
                "arithmetic": self.arithmetic,
                "mode": self.mode,
                "window_us": self.window_us,
                "layers": layers,
                "head": {
                    "rows": self.head.rows,
                    "cols": self.head.cols,
                    "boxes": self.head.boxes,
                    "classes": self.head.classes,
                },
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        layers = []
        for entry in raw["layers"]:
            if entry["type"] == "conv":
                k = entry["kernel"]
                kernel = (k, k) if isinstance(k, int) else tuple(k)
                act = PiecewiseLinear(
                    entry.get("activation", "relu"), entry.get("negative_slope", 0.1)
                )
                layers.append(
                    ConvSpec(
                        out_channels=entry["out_channels"],
                        kernel=kernel,
                        stride=entry.get("stride", 1),
                        padding=entry.get("padding", "same_zero"),
                        activation=act,
                    )
                )
            elif entry["type"] == "pool":
                sz = entry.get("size", 2)
                size = (sz, sz) if isinstance(sz, int) else tuple(sz)
                layers.append(PoolSpec(size=size, stride=entry.get("stride", size[0])))
            else:
                raise ShapeMismatch(f"unknown layer type {entry['type']!r}")
        head = raw["head"]
        config = cls(
            width=raw["input"]["w"],
            height=raw["input"]["h"],
            lam=raw["lambda"],
            layers=layers,
            head=HeadSpec(head["rows"], head["cols"], head["boxes"], head["classes"]),
            arithmetic=raw.get("arithmetic", "f64"),
            mode=raw.get("mode", "batched"),
            window_us=raw.get("window_us", 10_000),
        )
        config.validate()
        return config


def default_config(width=128, height=128, lam=2e-5):
    """Stock detection architecture: 128x128 -> 4x4 grid of 20 head values."""
    lrelu = PiecewiseLinear("leaky_relu", 0.1)
    layers = [
        ConvSpec(16, (3, 3), activation=lrelu),
        PoolSpec(),
        ConvSpec(16, (3, 3), activation=lrelu),
        PoolSpec(),
        ConvSpec(16, (3, 3), activation=lrelu),
        PoolSpec(),
        ConvSpec(32, (3, 3), activation=lrelu),
        PoolSpec(),
        ConvSpec(64, (3, 3), activation=lrelu),
        PoolSpec(),
        ConvSpec(32, (1, 1), activation=lrelu),
        ConvSpec(20, (1, 1), activation=PiecewiseLinear("identity")),
    ]
    return NetworkConfig(
        width=width,
        height=height,
        lam=lam,
        layers=layers,
        head=HeadSpec(rows=height // 32, cols=width // 32, boxes=2, classes=10),
    )


# --- weight container ---------------------------------------------------


def weight_names(config: NetworkConfig):
    """Tensor names the container must provide for a config."""
    names = []
    for i, spec in enumerate(config.layers):
        if isinstance(spec, ConvSpec):
            names.append(f"layer{i}.weight")
            names.append(f"layer{i}.bias")
    return names


def save_weights(prefix, tensors: dict):
    """Write <prefix>.manifest.json and <prefix>.bin (float32 LE payload)."""
    prefix = str(prefix)
    manifest = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append(
            {"name": name, "shape": list(np.shape(arr)), "offset": offset, "length": len(data)}
        )
        blobs.append(data)
        offset += len(data)
    Path(prefix + ".manifest.json").write_text(json.dumps({"tensors": manifest}, indent=2))
    Path(prefix + ".bin").write_bytes(b"".join(blobs))


def load_weights(prefix):
    """Read a weight container back into {name: float32 array}."""
    prefix = str(prefix)
    if prefix.endswith(".manifest.json"):
        prefix = prefix[: -len(".manifest.json")]
    elif prefix.endswith(".bin"):
        prefix = prefix[: -len(".bin")]
    manifest = json.loads(Path(prefix + ".manifest.json").read_text())
    blob = Path(prefix + ".bin").read_bytes()
    tensors = {}
    for entry in manifest["tensors"]:
        lo, n = entry["offset"], entry["length"]
        if lo + n > len(blob):
            raise ShapeMismatch(f"tensor {entry['name']} overruns the payload")
        arr = np.frombuffer(blob[lo:lo + n], dtype="<f4")
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors


def random_weights(config: NetworkConfig, rng):
    """Uniform weights in [-1, 1], scaled down by fan-in for stable depth."""
    tensors = {}
    for i, spec in enumerate(config.layers):
        if not isinstance(spec, ConvSpec):
            continue
        in_c = 1
        for prev in config.layers[:i]:
            if isinstance(prev, ConvSpec):
                in_c = prev.out_channels
        fan_in = in_c * spec.kernel[0] * spec.kernel[1]
        scale = 1.0 / np.sqrt(fan_in)
        shape = (spec.out_channels, in_c, spec.kernel[0], spec.kernel[1])
        tensors[f"layer{i}.weight"] = rng.uniform(-scale, scale, size=shape).astype(np.float32)
        tensors[f"layer{i}.bias"] = rng.uniform(-0.1, 0.1, size=spec.out_channels).astype(
            np.float32
        )
    return tensors


# --- network ------------------------------------------------------------


@dataclass
class BatchStats:
    """Per-batch change accounting, used by the benchmark and locality tests."""

    events: int = 0
    surface_changed: int = 0
    layer_recomputes: list = field(default_factory=list)
    layer_flips: list = field(default_factory=list)
    head_changed_mask: np.ndarray = None


class Network:
    """Event-driven network with persistent per-layer state."""

    def __init__(self, config: NetworkConfig, weights: dict):
        config.validate()
        self.config = config
        dtype = config.dtype
        self.surface = LeakySurface(config.width, config.height, config.lam, dtype)
        self.layers = []
        in_shape = (config.height, config.width, 1)
        for i, spec in enumerate(config.layers):
            if isinstance(spec, ConvSpec):
                wname, bname = f"layer{i}.weight", f"layer{i}.bias"
                if wname not in weights or bname not in weights:
                    raise MissingTensor(f"container lacks {wname}/{bname}")
                w = np.asarray(weights[wname])
                expected = (spec.out_channels, in_shape[2], spec.kernel[0], spec.kernel[1])
                if w.shape != expected:
                    raise ShapeMismatch(f"{wname} has shape {w.shape}, expected {expected}")
                kernel = ConvKernel(
                    w.astype(dtype),
                    np.asarray(weights[bname]).astype(dtype),
                    spec.stride,
                    spec.padding,
                )
                layer = EventConv2D(kernel, spec.activation, in_shape)
            else:
                layer = EventMaxPool2D(spec.size[0], spec.size[1], spec.stride, in_shape)
            self.layers.append(layer)
            in_shape = layer.out_shape

        values = np.zeros((config.height, config.width, 1), dtype=dtype)
        rates = np.zeros_like(values)
        for layer in self.layers:
            layer.init_state(values, rates)
            if isinstance(layer, EventConv2D):
                values, rates = layer.values(), layer.rates()
            else:
                values, rates = layer.fetch(values), layer.fetch(rates)
        self._head = values

    @property
    def clock(self):
        return self.surface.last_ts

    def head_output(self):
        return self._head.copy()

    def _propagate(self, update, stats: BatchStats):
        delta = LayerDelta(
            changed_mask=update.changed_mask,
            delta_leak=update.delta_leak,
            values=self.surface.values3,
            rates=self.surface.rates3,
        )
        stats.surface_changed += int(update.changed_mask.sum())
        for i, layer in enumerate(self.layers):
            delta = layer.apply(delta)
            stats.layer_recomputes[i] += layer.last_recompute_count
            stats.layer_flips[i] += layer.last_flip_count
        stats.head_changed_mask |= delta.changed_mask
        self._head = delta.values

    def apply_batch(self, batch: EventBatch):
        """Advance the network over one window; returns (head tensor, stats)."""
        n_layers = len(self.layers)
        stats = BatchStats(
            events=len(batch),
            layer_recomputes=[0] * n_layers,
            layer_flips=[0] * n_layers,
            head_changed_mask=np.zeros(
                (self.config.head.rows, self.config.head.cols), dtype=bool
            ),
        )
        if len(batch) == 0:
            self._propagate(self.surface.advance(batch.span_us), stats)
        elif self.config.mode == "batched":
            self._propagate(self.surface.apply(batch, mode="batched"), stats)
        else:
            for i in range(len(batch)):
                single = EventBatch(
                    window_start=batch.window_start,
                    window_end=batch.window_end,
                    xs=batch.xs[i:i + 1],
                    ys=batch.ys[i:i + 1],
                    ts=batch.ts[i:i + 1],
                    ps=batch.ps[i:i + 1],
                )
                self._propagate(self.surface.apply(single, mode="batched"), stats)
        return self.head_output(), stats


def build_network(config: NetworkConfig, weights: dict) -> Network:
    return Network(config, weights)


def dense_forward(config: NetworkConfig, weights: dict, surface_grid) -> np.ndarray:
    """Stateless full forward pass from a surface snapshot (the oracle)."""
    dtype = config.dtype
    if surface_grid.shape != (config.height, config.width):
        raise ShapeMismatch(
            f"surface {surface_grid.shape}, config expects "
            f"{(config.height, config.width)}"
        )
    x = surface_grid.astype(dtype)[..., None]
    in_c = 1
    for i, spec in enumerate(config.layers):
        if isinstance(spec, ConvSpec):
            wname, bname = f"layer{i}.weight", f"layer{i}.bias"
            if wname not in weights:
                raise MissingTensor(f"container lacks {wname}")
            kernel = ConvKernel(
                np.asarray(weights[wname]).astype(dtype),
                np.asarray(weights[bname]).astype(dtype),
                spec.stride,
                spec.padding,
            )
            if kernel.in_channels != in_c:
                raise ShapeMismatch(f"{wname} expects {kernel.in_channels} inputs, has {in_c}")
            pre = dense_conv(x, kernel)
            x = spec.activation.slope_map(pre) * pre
            in_c = spec.out_channels
        else:
            ph, pw, s = spec.size[0], spec.size[1], spec.stride
            out_h = (x.shape[0] - ph) // s + 1
            out_w = (x.shape[1] - pw) // s + 1
            win = np.lib.stride_tricks.sliding_window_view(x, (ph, pw), axis=(0, 1))
            win = win[: (out_h - 1) * s + 1 : s, : (out_w - 1) * s + 1 : s]
            x = win.max(axis=(3, 4))
    return x


def check_equivalence(
    config: NetworkConfig,
    weights: dict,
    stream: EventStream,
    window=None,
    tolerance=None,
    mode=None,
    arithmetic=None,
):
    """Run event and dense paths per window; report the worst deviation.

    Failures are data in the report, not exceptions.
    """
    import copy

    config = copy.deepcopy(config)
    if mode is not None:
        config.mode = mode
    if arithmetic is not None:
        config.arithmetic = arithmetic
    window = int(window) if window is not None else config.window_us
    if tolerance is None:
        tolerance = 1e-9 if config.arithmetic == "f64" else 1e-4

    net = build_network(config, weights)
    records = []
    worst = 0.0
    for index, batch in enumerate(window_events(stream, window)):
        head, stats = net.apply_batch(batch)
        ref = dense_forward(config, weights, net.surface.snapshot())
        err = float(np.max(np.abs(head - ref))) if head.size else 0.0
        worst = max(worst, err)
        records.append(
            {
                "index": index,
                "window": [batch.window_start, batch.window_end],
                "events": len(batch),
                "max_abs_err": err,
            }
        )
    return {
        "mode": config.mode,
        "arithmetic": config.arithmetic,
        "window_us": window,
        "tolerance": tolerance,
        "max_abs_err": worst,
        "passed": bool(worst <= tolerance),
        "batches": records,
    }
