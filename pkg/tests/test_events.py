import gzip

import numpy as np
import pytest

from pano_ba.errors import DataError, EventIngestError, EventParseError
from pano_ba.events import EventStream, clip_to_span, flip_polarities, load_events, pair_events, save_events


def _stream(rows):
    t, x, y, p = np.asarray(rows, dtype=float).T
    return EventStream(x, y, t, p)


def test_pairs_link_previous_event_at_same_pixel():
    stream = _stream([
        (0.10, 3, 4, 1),
        (0.20, 5, 5, -1),
        (0.30, 3, 4, -1),
        (0.40, 3, 4, 1),
        (0.50, 5, 5, 1),
        (0.60, 7, 1, 1),
    ])
    res = pair_events(stream)
    pairs = res.pairs
    np.testing.assert_array_equal(pairs.k, [2, 3, 4])
    np.testing.assert_allclose(pairs.t_prev, [0.10, 0.30, 0.20])
    np.testing.assert_allclose(pairs.dt, [0.20, 0.10, 0.30])
    np.testing.assert_array_equal(pairs.pol, [-1, 1, 1])
    np.testing.assert_array_equal(res.first_events, [0, 1, 5])
    assert res.n_active_pixels == 3
    assert res.n_zero_dt == 0


def test_single_event_pixels_produce_no_pairs():
    res = pair_events(_stream([(0.1, 0, 0, 1), (0.2, 1, 0, 1)]))
    assert len(res.pairs) == 0
    assert res.n_active_pixels == 2


def test_zero_interval_pairs_are_dropped():
    res = pair_events(_stream([(0.1, 2, 2, 1), (0.1, 2, 2, 1), (0.3, 2, 2, -1)]))
    assert res.n_zero_dt == 1
    assert len(res.pairs) == 1
    assert res.pairs.dt[0] == pytest.approx(0.2)


def test_window_restricts_predecessors():
    stream = _stream([(0.1, 1, 1, 1), (0.5, 1, 1, 1), (0.9, 1, 1, -1)])
    res = pair_events(stream, window=(0.4, 1.0))
    np.testing.assert_array_equal(res.pairs.k, [2])
    assert res.pairs.t_prev[0] == pytest.approx(0.5)
    np.testing.assert_array_equal(res.first_events, [1])
    assert res.n_in_window == 2


def test_pairs_sorted_by_time_then_pixel():
    stream = _stream([(0.1, 4, 0, 1), (0.1, 2, 0, 1), (0.5, 4, 0, 1), (0.5, 2, 0, 1)])
    pairs = pair_events(stream).pairs
    np.testing.assert_array_equal(pairs.x, [2, 4])


def test_unsorted_stream_is_rejected():
    with pytest.raises(EventIngestError):
        pair_events(_stream([(0.2, 0, 0, 1), (0.1, 0, 0, 1)]))


def test_sorted_orders_ties_by_row_then_column():
    stream = _stream([(0.2, 0, 0, 1), (0.1, 5, 2, 1), (0.1, 3, 2, 1), (0.1, 9, 1, 1)])
    s = stream.sorted()
    assert s.is_sorted()
    np.testing.assert_array_equal(s.x, [9, 3, 5, 0])


def test_clip_to_span_counts_drops():
    stream = _stream([(0.0, 0, 0, 1), (0.5, 0, 0, 1), (1.5, 0, 0, 1)])
    kept, n_drop = clip_to_span(stream, 0.1, 1.0)
    assert len(kept) == 1 and n_drop == 2


def test_flip_polarities_flips_requested_fraction():
    stream = _stream([(0.1 * i, i, 0, 1) for i in range(20)])
    flipped = flip_polarities(stream, 0.25, seed=3)
    assert np.count_nonzero(flipped.pol == -1) == 5
    np.testing.assert_array_equal(stream.pol, 1)
    with pytest.raises(DataError):
        flip_polarities(stream, 1.5)


def test_stream_validation():
    with pytest.raises(DataError):
        EventStream(np.zeros(2), np.zeros(2), np.zeros(2), np.array([1, 0]))
    with pytest.raises(DataError):
        EventStream(np.zeros(2), np.zeros(3), np.zeros(2), np.ones(2))


def test_text_round_trip(tmp_path):
    stream = _stream([(0.001, 3, 4, 1), (0.002, 5, 6, -1)])
    for name in ("ev.txt", "ev.txt.gz"):
        back = load_events(save_events(stream, tmp_path / name))
        np.testing.assert_allclose(back.t, stream.t)
        np.testing.assert_array_equal(back.x, stream.x)
        np.testing.assert_array_equal(back.pol, stream.pol)


def test_load_reads_zero_one_polarity_and_comments(tmp_path):
    path = tmp_path / "ev.txt.gz"
    with gzip.open(path, "wt", encoding="utf-8") as f:
        f.write("# t x y p\n0.5 1 2 0\n\n0.6 1 2 1\n")
    stream = load_events(path)
    np.testing.assert_array_equal(stream.pol, [-1, 1])


@pytest.mark.parametrize("line", ["0.1 1 2", "0.1 a 2 1", "0.1 1 2 3"])
def test_load_rejects_malformed_lines(tmp_path, line):
    path = tmp_path / "ev.txt"
    path.write_text(f"0.0 0 0 1\n{line}\n")
    with pytest.raises(EventParseError, match=":2:"):
        load_events(path)


def test_missing_file_is_parse_error(tmp_path):
    with pytest.raises(EventParseError):
        load_events(tmp_path / "nope.txt")


@pytest.mark.parametrize("window", [None, (0.25, 0.8)])
def test_pairing_is_stable_under_concatenation(rng, window):
    n = 400
    whole = EventStream(rng.integers(0, 6, n), rng.integers(0, 4, n), np.sort(rng.uniform(0.0, 1.0, n)),
                        rng.choice([-1, 1], n)).sorted()
    early, late = whole.subset(whole.t < 0.5), whole.subset(whole.t >= 0.5)
    joined = EventStream.concatenate(early, late)
    assert joined.is_sorted()
    a, b = pair_events(whole, window=window), pair_events(joined, window=window)
    assert len(a.pairs) > 0
    for name in ("k", "t", "t_prev", "x", "y", "pol"):
        np.testing.assert_array_equal(getattr(a.pairs, name), getattr(b.pairs, name))
    np.testing.assert_array_equal(a.first_events, b.first_events)
