"""Event and window value types, normalisation helpers and synthetic streams."""
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from evroad.core.errors import PreconditionError
from evroad.core.logger import get_logger

logger = get_logger(__name__)

DAVIS346 = (346, 260)


@dataclass(frozen=True, slots=True)
class SensorGeometry:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise PreconditionError(f"sensor geometry must be at least 1x1, got {self.width}x{self.height}")

    @property
    def max_delta(self) -> int:
        return self.width + self.height - 2


@dataclass(frozen=True, slots=True)
class Event:
    x: int
    y: int
    t: int
    p: int


@dataclass(frozen=True, slots=True)
class EventWindow:
    events: Tuple[Event, ...]
    geometry: SensorGeometry

    def __post_init__(self):
        if not self.events:
            raise PreconditionError("an event window needs at least one event")
        prev_t = None
        for e in self.events:
            if not (0 <= e.x < self.geometry.width and 0 <= e.y < self.geometry.height):
                raise PreconditionError(f"event ({e.x},{e.y}) outside {self.geometry.width}x{self.geometry.height} sensor")
            if e.p not in (-1, 1):
                raise PreconditionError(f"polarity must be -1 or +1, got {e.p}")
            if prev_t is not None and e.t < prev_t:
                raise PreconditionError(f"timestamps decrease inside window ({prev_t} -> {e.t})")
            prev_t = e.t

    def __len__(self):
        return len(self.events)

    def as_array(self) -> np.ndarray:
        """Integer matrix with one ``(x, y, t, p)`` row per event."""
        return np.array([(e.x, e.y, e.t, e.p) for e in self.events], dtype=np.int64)


def manhattan_delta(a: Event, b: Event) -> int:
    return abs(a.x - b.x) + abs(a.y - b.y)


def normalized_delta(d: int, geom: SensorGeometry) -> float:
    """Scale a Manhattan distance to [0, 1] by the largest distance on the sensor."""
    limit = geom.max_delta
    if d < 0 or d > limit:
        raise PreconditionError(f"distance {d} outside [0, {limit}] for {geom.width}x{geom.height} sensor")
    if limit == 0:
        return 0.0
    return d / limit


def event_features(w: EventWindow) -> np.ndarray:
    """N x 4 input features ``(x/W, y/H, relative time, polarity)``."""
    arr = w.as_array()
    feats = np.empty(arr.shape, dtype=np.float64)
    feats[:, 0] = arr[:, 0] / w.geometry.width
    feats[:, 1] = arr[:, 1] / w.geometry.height
    t = arr[:, 2]
    duration = t[-1] - t[0]
    feats[:, 2] = (t - t[0]) / duration if duration > 0 else 0.0
    feats[:, 3] = arr[:, 3]
    return feats


def window_deltas(w: EventWindow) -> np.ndarray:
    """N x N matrix of normalised Manhattan distances with a zero diagonal."""
    arr = w.as_array()
    d = np.abs(arr[:, None, 0] - arr[None, :, 0]) + np.abs(arr[:, None, 1] - arr[None, :, 1])
    limit = w.geometry.max_delta
    if limit == 0:
        return np.zeros(d.shape, dtype=np.float64)
    return d / float(limit)


#-------------------------------------------------
# Synthetic streams
#-------------------------------------------------
def _timestamps(rng: np.random.Generator, n_events: int) -> np.ndarray:
    return np.cumsum(rng.integers(1, 200, size=n_events)).astype(np.int64)


def synth_moving_edge(geom: SensorGeometry, n_events: int, edge_speed: float = 0.5,
                      seed: int = 0, stickiness: float = 0.97,
                      flip_prob: float = 0.05) -> Tuple[List[Event], List[int]]:
    """Events scattered around a vertical edge sweeping across the sensor.

    The edge midline moves ``edge_speed`` pixels per millisecond and wraps at
    the sensor border. Events alternate between the two sides of the edge in
    sticky runs; the leading side fires positive events and the trailing side
    negative ones (up to ``flip_prob`` noise), so windows that straddle the
    edge mix polarities while one-sided windows are nearly pure. Label 1 marks
    events left of the midline.
    """
    if n_events < 1:
        raise PreconditionError(f"n_events must be >= 1, got {n_events}")
    rng = np.random.default_rng(seed)
    band = max(2.0, geom.width / 20.0)
    direction = 1 if edge_speed >= 0 else -1

    t = _timestamps(rng, n_events)
    ys = rng.integers(0, geom.height, size=n_events)
    offsets = rng.uniform(0.5, band, size=n_events)
    stays = rng.random(n_events) < stickiness
    flips = rng.random(n_events) < flip_prob

    events, labels = [], []
    left = bool(rng.integers(2))
    for i in range(n_events):
        if i > 0 and not stays[i]:
            left = not left
        midline = (geom.width / 2.0 + edge_speed * t[i] / 1000.0) % geom.width
        x_real = midline - offsets[i] if left else midline + offsets[i]
        x = int(min(max(round(x_real), 0), geom.width - 1))
        label = 1 if x < midline else 0
        # Leading side brightens
        leading = (label == 0) if direction > 0 else (label == 1)
        p = 1 if leading else -1
        if flips[i]:
            p = -p
        events.append(Event(x=x, y=int(ys[i]), t=int(t[i]), p=p))
        labels.append(label)

    logger.debug(f"Generated moving-edge stream: {n_events} events, {sum(labels)} left of edge")
    return events, labels


def synth_road_scene(geom: SensorGeometry, n_events: int, segment: int = 50,
                     seed: int = 0) -> Tuple[List[Event], List[int]]:
    """Runs of ``segment`` events from the lower (road, label 1) or upper half.

    Road texture fires both polarities (positive rate in [0.35, 0.65]); the
    background is swept by edges of one sign (rate in [0, 0.15] or [0.85, 1]).
    Polarity entropy thus tracks the label, with overlap on short runs.
    """
    if n_events < 1:
        raise PreconditionError(f"n_events must be >= 1, got {n_events}")
    if segment < 1:
        raise PreconditionError(f"segment must be >= 1, got {segment}")
    if geom.height < 2:
        raise PreconditionError("road scenes need a sensor at least 2 pixels high")
    rng = np.random.default_rng(seed)
    half = geom.height // 2

    t = _timestamps(rng, n_events)
    events, labels = [], []
    for start in range(0, n_events, segment):
        stop = min(start + segment, n_events)
        size = stop - start
        road = int(rng.integers(2))
        if road:
            p_plus = rng.uniform(0.35, 0.65)
        else:
            p_plus = rng.uniform(0.0, 0.15)
            if rng.random() < 0.5:
                p_plus = 1.0 - p_plus
        xs = rng.integers(0, geom.width, size=size)
        ys = rng.integers(half, geom.height, size=size) if road else rng.integers(0, half, size=size)
        ps = np.where(rng.random(size) < p_plus, 1, -1)
        for k in range(size):
            events.append(Event(x=int(xs[k]), y=int(ys[k]), t=int(t[start + k]), p=int(ps[k])))
            labels.append(road)
    return events, labels


def make_window(events: Sequence[Event], geom: SensorGeometry) -> EventWindow:
    return EventWindow(events=tuple(events), geometry=geom)
