"""Event file parsing, windowing, label files and checkpoint persistence."""
import os
import struct
import threading
from dataclasses import dataclass
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np

from evroad.core.config import ModelConfig, load_model_config, write_kv_file
from evroad.core.errors import (
    ConfigError,
    CorruptionError,
    DataFormatError,
    ParseError,
    PreconditionError,
    ShapeError,
    VersionError,
)
from evroad.core.logger import get_logger
from evroad.services.events import Event, EventWindow, SensorGeometry
from evroad.services.network import ModelParams, param_shapes

logger = get_logger(__name__)

ENCODINGS = ("signed", "zero-one")
BINARY_MAGIC = b"EVB1"
CHECKPOINT_MAGIC = b"EVSSEG1"
CONFIG_SUFFIX = ".cfg"

_BINARY_HEADER = struct.Struct("<IIB")
_BINARY_RECORD = np.dtype([("t", "<i8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])

_checkpoint_locks: Dict[str, threading.Lock] = {}
_checkpoint_locks_guard = threading.Lock()


@dataclass(frozen=True)
class EventFileHeader:
    width: int
    height: int
    encoding: Literal["signed", "zero-one"] = "signed"

    @property
    def geometry(self) -> SensorGeometry:
        return SensorGeometry(self.width, self.height)


@dataclass(frozen=True)
class WindowingResult:
    windows: List[EventWindow]
    dropped: int


@dataclass(frozen=True)
class LabeledWindowSet:
    windows: List[EventWindow]
    labels: List
    mode: Literal["window", "event"] = "window"

    def __post_init__(self):
        if len(self.labels) != len(self.windows):
            raise DataFormatError(f"{len(self.labels)} label rows for {len(self.windows)} windows")
        if self.mode == "event":
            for i, (w, row) in enumerate(zip(self.windows, self.labels)):
                if len(row) != len(w):
                    raise DataFormatError(f"window {i}: {len(row)} event labels for {len(w)} events")

    def window_labels(self) -> List[int]:
        if self.mode == "window":
            return list(self.labels)
        return [majority_label(row) for row in self.labels]


#-------------------------------------------------
# Event files
#-------------------------------------------------
def _map_polarity(raw: int, encoding: str, lineno: Optional[int]) -> int:
    if encoding == "signed":
        if raw in (-1, 1):
            return raw
    elif raw in (0, 1):
        return 1 if raw == 1 else -1
    raise DataFormatError(f"line {lineno}: polarity {raw} invalid for {encoding} encoding")


def _parse_header(line: str) -> EventFileHeader:
    parts = line.split()
    if len(parts) != 3:
        raise ParseError(f"header must be 'W H ENC', got {line.strip()!r}", line=1)
    try:
        width, height = int(parts[0]), int(parts[1])
    except ValueError:
        raise ParseError(f"non-integer sensor size in header {line.strip()!r}", line=1)
    if parts[2] not in ENCODINGS:
        raise ParseError(f"unknown polarity encoding {parts[2]!r}", line=1)
    if width < 1 or height < 1:
        raise ParseError(f"sensor size must be >= 1, got {width}x{height}", line=1)
    return EventFileHeader(width, height, parts[2])


def _check_event(header: EventFileHeader, t: int, x: int, y: int, prev_t: Optional[int], lineno: int):
    if prev_t is not None and t < prev_t:
        raise DataFormatError(f"line {lineno}: timestamp {t} decreases (previous {prev_t})")
    if t < 0:
        raise DataFormatError(f"line {lineno}: negative timestamp {t}")
    if not (0 <= x < header.width and 0 <= y < header.height):
        raise DataFormatError(f"line {lineno}: coordinate ({x},{y}) outside {header.width}x{header.height} sensor")


def _text_lines(path: str) -> Iterator[Tuple[int, str]]:
    """Numbered lines of a UTF-8 file; undecodable bytes raise ParseError on their line."""
    with open(path, 'rb') as f:
        for lineno, raw in enumerate(f, start=1):
            try:
                yield lineno, raw.decode('utf-8')
            except UnicodeDecodeError as e:
                raise ParseError(f"{path}: invalid UTF-8 at byte {e.start}", line=lineno) from e


def parse_event_text(path: str) -> Tuple[SensorGeometry, List[Event]]:
    """Read an event file; text ``W H ENC`` + ``t x y p`` lines, or packed EVB1."""
    with open(path, 'rb') as f:
        if f.read(len(BINARY_MAGIC)) == BINARY_MAGIC:
            return parse_event_binary(path)

    events = []
    header = None
    prev_t = None
    for lineno, line in _text_lines(path):
        if header is None:
            header = _parse_header(line)
            continue
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(f"expected 't x y p', got {line.strip()!r}", line=lineno)
        try:
            t, x, y, p = (int(v) for v in parts)
        except ValueError:
            raise ParseError(f"non-integer field in {line.strip()!r}", line=lineno)
        _check_event(header, t, x, y, prev_t, lineno)
        events.append(Event(x=x, y=y, t=t, p=_map_polarity(p, header.encoding, lineno)))
        prev_t = t
    if header is None:
        raise ParseError("empty event file", line=1)

    logger.info(f"Parsed {len(events)} events from {path} ({header.width}x{header.height}, {header.encoding})")
    return header.geometry, events


def parse_event_binary(path: str) -> Tuple[SensorGeometry, List[Event]]:
    with open(path, 'rb') as f:
        data = f.read()
    if data[:len(BINARY_MAGIC)] != BINARY_MAGIC:
        raise VersionError(f"{path}: missing {BINARY_MAGIC!r} magic")
    offset = len(BINARY_MAGIC)
    if len(data) < offset + _BINARY_HEADER.size:
        raise CorruptionError(f"{path}: truncated binary header")
    width, height, enc = _BINARY_HEADER.unpack_from(data, offset)
    if enc >= len(ENCODINGS):
        raise DataFormatError(f"{path}: unknown encoding code {enc}")
    header = EventFileHeader(width, height, ENCODINGS[enc])
    payload = data[offset + _BINARY_HEADER.size:]
    if len(payload) % _BINARY_RECORD.itemsize:
        raise CorruptionError(f"{path}: payload of {len(payload)} bytes is not a whole number of records")
    records = np.frombuffer(payload, dtype=_BINARY_RECORD)

    events = []
    prev_t = None
    for i, rec in enumerate(records):
        t, x, y, p = int(rec["t"]), int(rec["x"]), int(rec["y"]), int(rec["p"])
        _check_event(header, t, x, y, prev_t, i + 1)
        events.append(Event(x=x, y=y, t=t, p=_map_polarity(p, header.encoding, i + 1)))
        prev_t = t
    logger.info(f"Parsed {len(events)} binary events from {path}")
    return header.geometry, events


def _encode_polarity(p: int, encoding: str) -> int:
    if encoding == "signed":
        return p
    return 1 if p == 1 else 0


def serialize_event_text(path: str, geom: SensorGeometry, events: Sequence[Event],
                         encoding: str = "signed") -> None:
    if encoding not in ENCODINGS:
        raise ConfigError(f"unknown polarity encoding {encoding!r}")
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(f"{geom.width} {geom.height} {encoding}\n")
        for e in events:
            f.write(f"{e.t} {e.x} {e.y} {_encode_polarity(e.p, encoding)}\n")


def write_event_binary(path: str, geom: SensorGeometry, events: Sequence[Event],
                       encoding: str = "signed") -> None:
    if encoding not in ENCODINGS:
        raise ConfigError(f"unknown polarity encoding {encoding!r}")
    records = np.array([(e.t, e.x, e.y, _encode_polarity(e.p, encoding)) for e in events], dtype=_BINARY_RECORD)
    with open(path, 'wb') as f:
        f.write(BINARY_MAGIC)
        f.write(_BINARY_HEADER.pack(geom.width, geom.height, ENCODINGS.index(encoding)))
        f.write(records.tobytes())


#-------------------------------------------------
# Windowing
#-------------------------------------------------
def _window_starts(count: int, n: int, stride: int) -> range:
    if count < n:
        return range(0)
    return range(0, count - n + 1, stride)


def window_stream(events: Sequence[Event], n: int, geom: SensorGeometry,
                  stride: Optional[int] = None) -> WindowingResult:
    """Cut a stream into windows of exactly ``n`` events.

    Non-overlapping by default; ``stride < n`` gives overlapping windows. The
    tail that does not fill a window is dropped and counted.
    """
    if n < 1:
        raise PreconditionError(f"window length must be >= 1, got {n}")
    stride = n if stride is None else stride
    if stride < 1:
        raise PreconditionError(f"stride must be >= 1, got {stride}")

    starts = _window_starts(len(events), n, stride)
    windows = [EventWindow(events=tuple(events[s:s + n]), geometry=geom) for s in starts]
    consumed = (starts[-1] + n) if len(starts) else 0
    dropped = len(events) - consumed
    if dropped:
        logger.warning(f"Dropped {dropped} trailing events that do not fill a {n}-event window")
    return WindowingResult(windows=windows, dropped=dropped)


#-------------------------------------------------
# Label files
#-------------------------------------------------
def majority_label(row: Sequence[int]) -> int:
    return 1 if 2 * sum(row) > len(row) else 0


def window_labels_from_events(event_labels: Sequence[int], n: int, stride: Optional[int] = None) -> List[List[int]]:
    """Group a per-event label stream into per-window rows, aligned with window_stream."""
    stride = n if stride is None else stride
    if stride < 1:
        raise PreconditionError(f"stride must be >= 1, got {stride}")
    return [list(event_labels[s:s + n]) for s in _window_starts(len(event_labels), n, stride)]


def _parse_bit(token: str, path: str, lineno: int) -> int:
    if token not in ("0", "1"):
        raise ParseError(f"{path}: label must be 0 or 1, got {token!r}", line=lineno)
    return int(token)


def write_window_labels(path: str, labels: Sequence[int]) -> None:
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for label in labels:
            f.write(f"{int(label)}\n")


def write_event_labels(path: str, rows: Sequence[Sequence[int]]) -> None:
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for row in rows:
            f.write(" ".join(str(int(v)) for v in row) + "\n")


def read_label_file(path: str, mode: Optional[Literal["window", "event"]] = None
                    ) -> Tuple[List, Literal["window", "event"]]:
    """Read a label file; one digit per line is per-window, N digits per line per-event.

    Without an explicit ``mode`` the layout is inferred, so a per-event file
    with N=1 reads as per-window. Both give the same window labels.
    """
    rows = []
    for lineno, line in _text_lines(path):
        tokens = line.split()
        if not tokens:
            continue
        rows.append([_parse_bit(tok, path, lineno) for tok in tokens])
    if mode is None:
        mode = "window" if rows and all(len(r) == 1 for r in rows) else "event"
    if mode == "window":
        if any(len(r) != 1 for r in rows):
            raise DataFormatError(f"{path}: per-window labels need one digit per line")
        return [r[0] for r in rows], "window"
    return rows, "event"


def load_labeled_windows(events_path: str, labels_path: str, n: int, stride: Optional[int] = None,
                         mode: Optional[Literal["window", "event"]] = None) -> LabeledWindowSet:
    geom, events = parse_event_text(events_path)
    result = window_stream(events, n, geom, stride)
    labels, mode = read_label_file(labels_path, mode)
    return LabeledWindowSet(windows=result.windows, labels=labels, mode=mode)


#-------------------------------------------------
# Checkpoints
#-------------------------------------------------
def _lock_for(path: str) -> threading.Lock:
    key = os.path.abspath(path)
    with _checkpoint_locks_guard:
        return _checkpoint_locks.setdefault(key, threading.Lock())


def config_path_for(path: str) -> str:
    return path + CONFIG_SUFFIX


def save_checkpoint(params: ModelParams, path: str) -> None:
    """Write tensors as float32 records after the EVSSEG1 magic, plus a key=value config sidecar."""
    chunks = [CHECKPOINT_MAGIC]
    for name, array in params.items():
        encoded = name.encode('utf-8')
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())

    with _lock_for(path):
        tmp_path = f"{path}.tmp{os.getpid()}.{threading.get_ident()}"
        with open(tmp_path, 'wb') as f:
            f.write(b"".join(chunks))
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, path)
        write_kv_file(config_path_for(path), params.config)
    logger.info(f"Checkpoint with {len(params)} tensors saved to {path}")


def _read_tensors(path: str) -> Dict[str, np.ndarray]:
    with open(path, 'rb') as f:
        data = f.read()
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise VersionError(f"{path}: not an {CHECKPOINT_MAGIC.decode()} checkpoint (magic {data[:7]!r})")

    tensors = {}
    pos = len(CHECKPOINT_MAGIC)

    def take(size: int) -> bytes:
        nonlocal pos
        if pos + size > len(data):
            raise CorruptionError(f"{path}: truncated at byte {pos} (needed {size} more)")
        chunk = data[pos:pos + size]
        pos += size
        return chunk

    while pos < len(data):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode('utf-8')
        except UnicodeDecodeError as e:
            raise CorruptionError(f"{path}: tensor name at byte {pos - name_len} is not UTF-8") from e
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = np.frombuffer(take(4 * count), dtype="<f4")
        tensors[name] = payload.reshape(dims).copy()
    return tensors


def load_checkpoint(path: str, config: Optional[ModelConfig] = None,
                    dtype=np.float64) -> ModelParams:
    """Load a checkpoint and verify its tensors against the model config.

    The config comes from the ``.cfg`` sidecar; an explicit ``config`` must
    agree with it and with every tensor name and shape.
    """
    tensors = _read_tensors(path)
    sidecar = config_path_for(path)
    stored = load_model_config(sidecar) if os.path.isfile(sidecar) else None
    if config is None and stored is None:
        raise ConfigError(f"{path}: no config sidecar and no config given")
    if config is not None and stored is not None and config != stored:
        raise ShapeError(f"{path}: checkpoint config disagrees with the requested config")
    config = config or stored

    expected = param_shapes(config)
    unknown = sorted(set(tensors) - set(expected))
    missing = sorted(set(expected) - set(tensors))
    if unknown or missing:
        raise ShapeError(f"{path}: tensor names do not match architecture (unknown {unknown[:3]}, missing {missing[:3]})")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise ShapeError(f"{path}: tensor {name} has shape {tensors[name].shape}, expected {shape}")

    ordered = {name: tensors[name].astype(dtype) for name in expected}
    logger.info(f"Loaded checkpoint {path} ({len(ordered)} tensors)")
    return ModelParams(config, ordered)
