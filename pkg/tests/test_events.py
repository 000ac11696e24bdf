import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evcnn.errors import (
    CoordinateOutOfBounds,
    MalformedRecord,
    NonMonotoneTimestamp,
    ZeroWindow,
)
from evcnn.events import Event, EventStream, read_stream, window_events, write_stream


def random_stream(rng, n, width=64, height=64, span=100_000):
    ts = np.sort(rng.integers(0, span, size=n).astype(np.uint64))
    return EventStream(
        width,
        height,
        xs=rng.integers(0, width, size=n),
        ys=rng.integers(0, height, size=n),
        ts=ts,
        ps=rng.choice([-1, 1], size=n),
    )


def test_text_single_event():
    data = b"EVT 64 64\n1500,3,4,1\n"
    stream = read_stream(data, "text")
    assert len(stream) == 1
    assert list(stream) == [Event(x=3, y=4, ts=1500, polarity=1)]


def test_text_empty_body():
    stream = read_stream(b"EVT 32 48\n", "text")
    assert len(stream) == 0
    assert (stream.sensor_width, stream.sensor_height) == (32, 48)


def test_write_empty_is_header_only():
    assert write_stream(EventStream(10, 12), "text") == b"EVT 10 12\n"
    assert write_stream(EventStream(10, 12), "binary") == b"EVT1" + bytes([10, 0, 12, 0])


def test_write_singleton():
    s = EventStream.from_events(8, 8, [Event(1, 2, 99, -1)])
    assert write_stream(s, "text") == b"EVT 8 8\n99,1,2,-1\n"


@pytest.mark.parametrize("fmt", ["text", "binary"])
def test_round_trip_1000_random_events(fmt):
    rng = np.random.default_rng(42)
    stream = random_stream(rng, 1000)
    blob = write_stream(stream, fmt)
    again = read_stream(blob, fmt)
    assert again == stream
    # writing the re-read stream is byte-identical (canonical form)
    assert write_stream(again, fmt) == blob


@given(st.data())
@settings(max_examples=30, deadline=None)
def test_read_write_identity_property(data):
    n = data.draw(st.integers(0, 50))
    w = data.draw(st.integers(1, 200))
    h = data.draw(st.integers(1, 200))
    ts = sorted(data.draw(st.lists(st.integers(0, 2**40), min_size=n, max_size=n)))
    events = [
        Event(
            x=data.draw(st.integers(0, w - 1)),
            y=data.draw(st.integers(0, h - 1)),
            ts=t,
            polarity=data.draw(st.sampled_from([-1, 1])),
        )
        for t in ts
    ]
    stream = EventStream.from_events(w, h, events)
    for fmt in ("text", "binary"):
        assert read_stream(write_stream(stream, fmt), fmt) == stream


def test_malformed_record_reports_line():
    with pytest.raises(MalformedRecord) as exc:
        read_stream(b"EVT 64 64\n100,1,2,1\nbogus\n", "text")
    assert "line 3" in str(exc.value)


def test_bad_polarity_rejected():
    with pytest.raises(MalformedRecord):
        read_stream(b"EVT 64 64\n100,1,2,0\n", "text")


def test_out_of_bounds_rejected():
    with pytest.raises(CoordinateOutOfBounds):
        read_stream(b"EVT 4 4\n100,4,0,1\n", "text")


def test_non_monotone_rejected():
    with pytest.raises(NonMonotoneTimestamp):
        read_stream(b"EVT 64 64\n100,1,1,1\n99,1,1,1\n", "text")


def test_binary_magic_required():
    with pytest.raises(MalformedRecord):
        read_stream(b"NOPE" + b"\x00" * 16, "binary")


def test_binary_truncated_record():
    s = EventStream.from_events(8, 8, [Event(1, 2, 99, -1)])
    blob = write_stream(s, "binary")
    with pytest.raises(MalformedRecord):
        read_stream(blob[:-1], "binary")


def test_window_hand_partition():
    stream = EventStream.from_events(
        64, 64, [Event(1, 1, 0, 1), Event(2, 2, 4000, 1), Event(3, 3, 12000, -1)]
    )
    batches = window_events(stream, 10_000)
    assert [len(b) for b in batches] == [2, 1]
    assert [list(b.ts) for b in batches] == [[0, 4000], [12000]]
    assert (batches[0].window_start, batches[0].window_end) == (0, 10_000)
    assert (batches[1].window_start, batches[1].window_end) == (10_000, 20_000)


def test_window_larger_than_span():
    stream = EventStream.from_events(64, 64, [Event(1, 1, 5, 1), Event(2, 2, 77, 1)])
    batches = window_events(stream, 10_000)
    assert len(batches) == 1 and len(batches[0]) == 2


def test_window_emits_empty_middle():
    stream = EventStream.from_events(64, 64, [Event(1, 1, 0, 1), Event(2, 2, 25_000, 1)])
    batches = window_events(stream, 10_000)
    assert [len(b) for b in batches] == [1, 0, 1]
    assert (batches[1].window_start, batches[1].window_end) == (10_000, 20_000)


def test_window_zero_rejected():
    with pytest.raises(ZeroWindow):
        window_events(EventStream(4, 4), 0)


def test_window_empty_stream():
    assert window_events(EventStream(4, 4), 1000) == []


@given(st.integers(1, 20_000), st.integers(0, 400))
@settings(max_examples=30, deadline=None)
def test_window_preserves_count_order_and_bounds(window, n):
    rng = np.random.default_rng(n)
    stream = random_stream(rng, n)
    batches = window_events(stream, window)
    assert sum(len(b) for b in batches) == len(stream)
    all_ts = np.concatenate([b.ts for b in batches]) if batches else np.array([])
    assert np.array_equal(all_ts, stream.ts)
    for b in batches:
        assert np.all(b.ts.astype(np.int64) >= b.window_start)
        assert np.all(b.ts.astype(np.int64) < b.window_end)
