"""
Event streams, the per-pixel predecessor pairing that turns a stream into
residual pairs, and the plain `t x y p` text format.
"""
from __future__ import annotations

import gzip
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Optional, Tuple

import numpy as np

from .errors import DataError, EventIngestError, EventParseError, log_and_reraise
from .utils import atomic_write

log = logging.getLogger(__name__)


@dataclass(eq=False)
class EventStream:
    """Struct-of-arrays event container, sorted by t."""
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    pol: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int32).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.int32).reshape(-1)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        self.pol = np.asarray(self.pol, dtype=np.int8).reshape(-1)
        n = self.t.size
        if not (self.x.size == self.y.size == self.pol.size == n):
            raise DataError("event field arrays differ in length")
        if n and not np.all(np.isin(self.pol, (-1, 1))):
            raise DataError("event polarity must be +1 or -1 in memory")

    @classmethod
    def empty(cls) -> "EventStream":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))

    def __len__(self) -> int:
        return self.t.size

    def subset(self, sel) -> "EventStream":
        return EventStream(self.x[sel], self.y[sel], self.t[sel], self.pol[sel])

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.t) >= 0))

    def sorted(self) -> "EventStream":
        """Stable ordering by (t, y, x)."""
        order = np.lexsort((self.x, self.y, self.t))
        return self.subset(order)

    @staticmethod
    def concatenate(*streams: "EventStream") -> "EventStream":
        if not streams:
            return EventStream.empty()
        return EventStream(
            np.concatenate([s.x for s in streams]),
            np.concatenate([s.y for s in streams]),
            np.concatenate([s.t for s in streams]),
            np.concatenate([s.pol for s in streams]),
        )


@dataclass(eq=False)
class ResidualPairs:
    """
    One row per event with a predecessor at the same pixel:
    t is t_k, t_prev is t_k - dt_k.
    """
    k: np.ndarray
    t: np.ndarray
    t_prev: np.ndarray
    x: np.ndarray
    y: np.ndarray
    pol: np.ndarray

    def __len__(self) -> int:
        return self.t.size

    @property
    def dt(self) -> np.ndarray:
        return self.t - self.t_prev

    @property
    def pixels(self) -> np.ndarray:
        return np.stack([self.x, self.y], axis=-1).astype(float)

    def subset(self, sel) -> "ResidualPairs":
        return ResidualPairs(self.k[sel], self.t[sel], self.t_prev[sel], self.x[sel], self.y[sel], self.pol[sel])


@dataclass(eq=False)
class PairingResult:
    pairs: ResidualPairs
    first_events: np.ndarray   # stream indices of the first in-window event per active pixel
    n_in_window: int
    n_zero_dt: int

    @property
    def n_active_pixels(self) -> int:
        return int(self.first_events.size)


def clip_to_span(stream: EventStream, t_first: float, t_last: float) -> Tuple[EventStream, int]:
    keep = (stream.t >= t_first) & (stream.t <= t_last)
    n_drop = int(stream.t.size - np.count_nonzero(keep))
    if n_drop:
        log.warning("Discarded %d event(s) outside trajectory span [%.6f, %.6f]", n_drop, t_first, t_last)
    return stream.subset(keep), n_drop


def pair_events(stream: EventStream, window: Optional[Tuple[float, float]] = None) -> PairingResult:
    """
    Link every in-window event to the previous in-window event at the same
    pixel. The first event per pixel has no predecessor and is reported in
    `first_events`; zero-interval pairs are dropped and counted. Pairs are
    returned ordered by (t_k, x, y).
    """
    if not stream.is_sorted():
        raise EventIngestError("event stream is not sorted by timestamp")
    if window is None:
        sel = np.arange(len(stream))
    else:
        t0, t1 = window
        sel = np.flatnonzero((stream.t >= t0) & (stream.t <= t1))

    xs, ys, ts = stream.x[sel], stream.y[sel], stream.t[sel]
    key = ys.astype(np.int64) * (int(xs.max(initial=0)) + 1) + xs
    # stable sort keeps temporal order inside each pixel
    order = np.argsort(key, kind="stable")
    ks = key[order]
    same = np.zeros(order.size, dtype=bool)
    same[1:] = ks[1:] == ks[:-1]
    cur = order[same]
    prev = order[np.flatnonzero(same) - 1]
    first_events = sel[order[~same]]

    dt = ts[cur] - ts[prev]
    zero = dt <= 0.0
    n_zero = int(np.count_nonzero(zero))
    if n_zero:
        log.warning("Dropped %d zero-interval pair(s) (duplicate timestamps at one pixel)", n_zero)
    cur, prev = cur[~zero], prev[~zero]

    idx = sel[cur]
    pairs = ResidualPairs(
        k=idx.astype(np.int64),
        t=stream.t[idx],
        t_prev=ts[prev],
        x=stream.x[idx],
        y=stream.y[idx],
        pol=stream.pol[idx],
    )
    pairs = pairs.subset(np.lexsort((pairs.y, pairs.x, pairs.t)))
    log.debug("Paired %d events into %d pairs over %d active pixels", sel.size, len(pairs), first_events.size)
    return PairingResult(pairs=pairs, first_events=np.sort(first_events), n_in_window=int(sel.size), n_zero_dt=n_zero)


def flip_polarities(stream: EventStream, fraction: float, seed: int = 0) -> EventStream:
    if not 0.0 <= fraction <= 1.0:
        raise DataError(f"flip fraction must be in [0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    n_flip = int(round(fraction * len(stream)))
    pol = stream.pol.copy()
    pol[rng.choice(len(stream), size=n_flip, replace=False)] *= -1
    return EventStream(stream.x.copy(), stream.y.copy(), stream.t.copy(), pol)


def _open_text(path: Path, mode: str) -> IO[str]:
    if path.suffix == ".gz":
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


@log_and_reraise(EventParseError)
def load_events(path: str | Path) -> EventStream:
    """
    Read `t x y p` lines; p is 0/1 on disk (0 -> -1). `.gz` files are
    decompressed transparently.
    """
    path = Path(path)
    ts, xs, ys, ps = [], [], [], []
    with _open_text(path, "r") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise EventParseError(f"{path}:{lineno}: expected 't x y p', got {raw.strip()!r}")
            try:
                t = float(parts[0])
                x, y, p = int(parts[1]), int(parts[2]), int(parts[3])
            except ValueError as e:
                raise EventParseError(f"{path}:{lineno}: {e}") from e
            if p not in (0, 1, -1):
                raise EventParseError(f"{path}:{lineno}: polarity must be 0 or 1, got {p}")
            ts.append(t)
            xs.append(x)
            ys.append(y)
            ps.append(1 if p == 1 else -1)
    return EventStream(np.asarray(xs), np.asarray(ys), np.asarray(ts), np.asarray(ps))


@log_and_reraise(DataError)
def save_events(stream: EventStream, path: str | Path) -> Path:
    path = Path(path)
    pol01 = (stream.pol > 0).astype(np.int8)
    if path.suffix == ".gz":
        with atomic_write(path, "wb") as raw, gzip.open(raw, "wt", encoding="utf-8") as f:
            _write_lines(f, stream, pol01)
    else:
        with atomic_write(path) as f:
            _write_lines(f, stream, pol01)
    return path


def _write_lines(f: IO[str], stream: EventStream, pol01: np.ndarray) -> None:
    for t, x, y, p in zip(stream.t, stream.x, stream.y, pol01):
        f.write(f"{t:.9f} {x} {y} {p}\n")
