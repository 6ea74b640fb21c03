"""Forward models linking virtual sharp renders to observations.

A view's ``p`` virtual sharp renders average into the predicted blurry image,
and log-intensity differences between adjacent renders divided by the
contrast threshold give the predicted signed event counts per bin.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .render import to_gray, to_log

DEFAULT_THETA = 0.3


@dataclass
class RenderedStack:
    """``p`` sharp renders of one view, ``colors`` shaped ``(p, ..., 3)``."""

    colors: np.ndarray | torch.Tensor
    timestamps: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.colors.shape[-1] != 3 or self.colors.ndim < 2:
            raise ValueError("stack colors must be shaped (p, ..., 3)")
        if len(self.timestamps) and len(self.timestamps) != self.colors.shape[0]:
            raise ValueError("one timestamp per rendered pose")

    @property
    def p(self) -> int:
        return int(self.colors.shape[0])

    @property
    def gray(self):
        return to_gray(self.colors)

    @property
    def log(self):
        return to_log(self.gray)


@dataclass(frozen=True)
class EventRecord:
    x: int
    y: int
    t: float
    polarity: int


@dataclass
class EventStream:
    """Columnar event stream; ``polarity`` holds +1/-1."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    polarity: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        self.x = np.asarray(self.x, dtype=np.int64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        self.polarity = np.asarray(self.polarity, dtype=np.int64).reshape(-1)
        if not len(self.t) == len(self.x) == len(self.y) == len(self.polarity):
            raise ValueError("event columns differ in length")
        if len(self.polarity) and not np.all(np.abs(self.polarity) == 1):
            raise ValueError("event polarity must be +1 or -1")

    @classmethod
    def empty(cls) -> "EventStream":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))

    @classmethod
    def from_records(cls, records) -> "EventStream":
        records = list(records)
        if not records:
            return cls.empty()
        return cls([r.t for r in records], [r.x for r in records], [r.y for r in records],
                   [r.polarity for r in records])

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self):
        for i in range(len(self)):
            yield EventRecord(int(self.x[i]), int(self.y[i]), float(self.t[i]), int(self.polarity[i]))

    def sorted(self) -> "EventStream":
        order = np.argsort(self.t, kind="stable")
        return EventStream(self.t[order], self.x[order], self.y[order], self.polarity[order])

    def flipped(self) -> "EventStream":
        return EventStream(self.t, self.x, self.y, -self.polarity)


@dataclass
class EventBinGrid:
    """Signed per-pixel event counts for each adjacent timestamp pair: ``(p-1, H, W)``."""

    counts: np.ndarray
    timestamps: np.ndarray
    dropped: int = 0  # events outside [t_1, t_p]


def synthesize_blur(stack):
    """Mean of the virtual sharp renders over the pose axis.

    Accepts a :class:`RenderedStack`, a ``(p, ..., 3)`` array or a list of images.
    """
    colors = stack.colors if isinstance(stack, RenderedStack) else stack
    if isinstance(colors, (list, tuple)):
        if len({tuple(c.shape) for c in colors}) > 1:
            raise ValueError("sharp renders differ in resolution")
        colors = torch.stack(list(colors)) if isinstance(colors[0], torch.Tensor) else np.stack(colors)
    if colors.shape[0] < 1:
        raise ValueError("need at least one sharp render")
    return colors.mean(0)


def predict_events(stack, theta: float = DEFAULT_THETA, quantize: bool = False):
    """Predicted signed event counts ``(L_{i+1} - L_i) / theta`` between adjacent poses.

    Accepts a :class:`RenderedStack` or a ``(p, ...)`` log-intensity array.
    ``quantize`` truncates toward zero (floor for rises, ceil for drops); it
    has zero gradient and is off by default.
    """
    if theta <= 0:
        raise ValueError("contrast threshold must be positive")
    L = stack.log if isinstance(stack, RenderedStack) else stack
    if L.shape[0] < 2:
        raise ValueError("event prediction needs at least two poses")
    e = (L[1:] - L[:-1]) / theta
    if quantize:
        e = torch.trunc(e) if isinstance(e, torch.Tensor) else np.trunc(e)
    return e


def bin_events(stream: EventStream, timestamps, width: int, height: int) -> EventBinGrid:
    """Accumulate signed polarities into ``[t_i, t_{i+1})`` bins (the last bin is closed)."""
    ts = np.asarray(timestamps, dtype=np.float64)
    if len(ts) < 2 or np.any(np.diff(ts) <= 0):
        raise ValueError("bin timestamps must be strictly increasing with at least two entries")
    n_bins = len(ts) - 1
    counts = np.zeros((n_bins, height, width), dtype=np.int64)
    if len(stream) == 0:
        return EventBinGrid(counts, ts, 0)
    if (stream.x.min() < 0 or stream.y.min() < 0 or stream.x.max() >= width
            or stream.y.max() >= height):
        raise ValueError("event pixel coordinates outside the image")
    b = np.searchsorted(ts, stream.t, side="right") - 1
    b[stream.t == ts[-1]] = n_bins - 1
    keep = (b >= 0) & (b < n_bins)
    np.add.at(counts, (b[keep], stream.y[keep], stream.x[keep]), stream.polarity[keep])
    return EventBinGrid(counts, ts, int((~keep).sum()))
