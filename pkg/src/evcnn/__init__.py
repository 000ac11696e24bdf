"""Event-driven CNN inference for neuromorphic camera streams.

The event path keeps per-layer state and recomputes features only where
events land; ``dense_forward`` is the stateless reference it must match.
"""

from .activations import PiecewiseLinear
from .econv import ConvKernel, EventConv2D, LayerDelta, dense_conv
from .emaxpool import EventMaxPool2D
from .events import Event, EventBatch, EventStream, read_stream, window_events, write_stream
from .network import (
    BatchStats,
    ConvSpec,
    HeadSpec,
    Network,
    NetworkConfig,
    PoolSpec,
    build_network,
    check_equivalence,
    default_config,
    dense_forward,
    load_weights,
    random_weights,
    save_weights,
)
from .surface import LeakySurface, SurfaceUpdate

__all__ = [
    "BatchStats",
    "ConvKernel",
    "ConvSpec",
    "Event",
    "EventBatch",
    "EventConv2D",
    "EventMaxPool2D",
    "EventStream",
    "HeadSpec",
    "LayerDelta",
    "LeakySurface",
    "Network",
    "NetworkConfig",
    "PiecewiseLinear",
    "PoolSpec",
    "SurfaceUpdate",
    "build_network",
    "check_equivalence",
    "default_config",
    "dense_conv",
    "dense_forward",
    "load_weights",
    "random_weights",
    "read_stream",
    "save_weights",
    "window_events",
    "write_stream",
]
