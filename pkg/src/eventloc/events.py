"""Event streams, noise filters and event-image accumulation."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd.ops import interp_matrix

EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "u1")])
EVT_MAGIC = b"LEAREVT1"
DEFAULT_WINDOW_US = 10_000


@dataclass
class EventStream:
    events: np.ndarray  # structured EVENT_DTYPE records, time-ordered
    width: int
    height: int

    def __post_init__(self):
        self.events = np.asarray(self.events, dtype=EVENT_DTYPE)
        ev = self.events
        if ev.size:
            if np.any(np.diff(ev["t"].astype(np.int64)) < 0):
                raise ValueError("event timestamps must be non-decreasing")
            if ev["x"].max() >= self.width or ev["y"].max() >= self.height:
                raise ValueError("event coordinates outside the sensor")
            if not np.all(np.isin(ev["p"], (-1, 1))):
                raise ValueError("polarity must be -1 or +1")

    @classmethod
    def from_arrays(cls, t, x, y, p, width, height) -> "EventStream":
        ev = np.zeros(len(t), dtype=EVENT_DTYPE)
        ev["t"], ev["x"], ev["y"], ev["p"] = t, x, y, p
        return cls(ev, width, height)

    @classmethod
    def empty(cls, width, height) -> "EventStream":
        return cls(np.zeros(0, dtype=EVENT_DTYPE), width, height)

    def __len__(self):
        return len(self.events)

    def subset(self, keep: np.ndarray) -> "EventStream":
        return EventStream(self.events[keep], self.width, self.height)


def _last_seen_filter(stream: EventStream, window_us: int, mode: str) -> np.ndarray:
    if window_us <= 0:
        raise ValueError("window_us must be positive")
    ev = stream.events
    keep = np.zeros(len(ev), dtype=bool)
    # per (pixel, polarity) timestamp: last event seen (stc) or last kept event (trail)
    last = {}
    for i, (t, x, y, p) in enumerate(zip(ev["t"].tolist(), ev["x"].tolist(), ev["y"].tolist(), ev["p"].tolist())):
        key = (x, y, p)
        prev = last.get(key)
        recent = prev is not None and t - prev <= window_us
        if mode == "stc":
            keep[i] = recent
            last[key] = t
        elif not recent:
            keep[i] = True
            last[key] = t
    return keep


def stc_filter(stream: EventStream, window_us: int = DEFAULT_WINDOW_US) -> EventStream:
    """Keep an event only if the same pixel fired with the same polarity within ``window_us`` before."""
    return stream.subset(_last_seen_filter(stream, window_us, "stc"))


def trail_filter(stream: EventStream, window_us: int = DEFAULT_WINDOW_US) -> EventStream:
    """Drop same-pixel, same-polarity repeats within ``window_us`` of the last kept event."""
    return stream.subset(_last_seen_filter(stream, window_us, "trail"))


@dataclass
class EventImage:
    values: np.ndarray  # (H, W) in [0, 1]
    window: tuple


def center_crop_resize(img: np.ndarray, target) -> np.ndarray:
    """Center-crop to the target aspect ratio, then bilinearly resize to ``target`` = (W, H)."""
    tw, th = target
    h, w = img.shape
    if (w, h) == (tw, th):
        return img.copy()
    if w * th > h * tw:
        cw, ch = int(round(h * tw / th)), h
    else:
        cw, ch = w, int(round(w * th / tw))
    x0, y0 = (w - cw) // 2, (h - ch) // 2
    crop = img[y0:y0 + ch, x0:x0 + cw]
    return interp_matrix(ch, th) @ crop @ interp_matrix(cw, tw).T


def make_event_image(stream: EventStream, window, target_extent=None, percentile: float = 99.0) -> EventImage:
    """Recency-weighted event counts over [t0, t1), percentile-clipped and scaled to [0, 1].

    Each event contributes (t - t0) / (t1 - t0), so events late in the window
    dominate and edges smeared by motion sharpen toward their final position.
    """
    t0, t1 = int(window[0]), int(window[1])
    if t0 >= t1:
        raise ValueError("event window must satisfy t0 < t1")
    target = target_extent or (stream.width, stream.height)
    ev = stream.events
    sel = (ev["t"] >= t0) & (ev["t"] < t1)
    acc = np.zeros((stream.height, stream.width))
    if np.any(sel):
        e = ev[sel]
        weight = (e["t"].astype(np.float64) - t0) / (t1 - t0)
        np.add.at(acc, (e["y"].astype(np.int64), e["x"].astype(np.int64)), weight * np.abs(e["p"]))
    nz = acc[acc > 0]
    if nz.size:
        clip = np.percentile(nz, percentile)
        acc = np.minimum(acc, clip) / clip
    out = np.clip(center_crop_resize(acc, target), 0.0, 1.0)
    return EventImage(out, (t0, t1))


# -- file formats ------------------------------------------------------------

def save_events(path, stream: EventStream) -> None:
    with open(path, "wb") as fh:
        fh.write(EVT_MAGIC)
        fh.write(struct.pack("<IIQ", stream.width, stream.height, len(stream.events)))
        fh.write(stream.events.astype(EVENT_DTYPE).tobytes())


def load_events(path) -> EventStream:
    raw = Path(path).read_bytes()
    if raw[:8] != EVT_MAGIC:
        raise ValueError(f"{path}: not an event file (bad magic)")
    w, h, n = struct.unpack_from("<IIQ", raw, 8)
    ev = np.frombuffer(raw, dtype=EVENT_DTYPE, count=n, offset=24).copy()
    return EventStream(ev, w, h)


def load_events_csv(path, width, height) -> EventStream:
    """Plain-text fixtures: one ``t,x,y,p`` record per line."""
    text = Path(path).read_text()
    if not text.strip():
        return EventStream.empty(width, height)
    rows = np.loadtxt(text.splitlines(), delimiter=",", ndmin=2, dtype=np.int64)
    return EventStream.from_arrays(rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3], width, height)
