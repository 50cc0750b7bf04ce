"""
In-memory telemetry database.

Topic-keyed FIFO rings of timestamped frames, the hexadecimal short-coding
wire codec, an atomic register for model snapshots and append-only disk
persistence.

Wire layout (uppercase hex, no separators):
    msg_type(2) | robot_id(2) | seq(4) | timestamp(8) | count(2) | field(4)*count | checksum(2)
Fields are two's-complement 16-bit fixed point holding physical*10. The
checksum is the XOR of every preceding byte.
"""
import fnmatch
import json
import logging
import os
import re
import threading
import uuid
from collections import deque
from dataclasses import dataclass
from enum import IntEnum
from typing import Deque, Dict, Iterable, List, Optional, Sequence, Tuple

from django.conf import settings

from ..exceptions import (
    ChecksumMismatch, CursorLagged, FieldOverflow, IoFailure, MalformedFrame,
)

logger = logging.getLogger(__name__)

FIXED_POINT_SCALE = 10
FIELD_LIMIT = 32767
MAX_FIELDS = 16
SEQ_MODULUS = 1 << 16
HEADER_CHARS = 2 + 2 + 4 + 8 + 2
_HEX_RE = re.compile(r'^[0-9A-F]*$')


class MsgType(IntEnum):
    PLANT_STATE = 1
    PLANT_COMMAND = 2
    PLANT_CAMERA = 3
    TWIN_STATE = 4
    MODEL_SNAPSHOT = 5
    CONTROL_SETPOINT = 6


class Topics:
    """Topic names shared by every module"""
    PLANT_STATE = 'plant.state'
    PLANT_COMMAND = 'plant.command'
    PLANT_CAMERA = 'plant.camera'
    TWIN_STATE = 'twin.state'
    MODEL_SNAPSHOT = 'model.snapshot'
    CONTROL_SETPOINT = 'control.setpoint'

    ALL = (PLANT_STATE, PLANT_COMMAND, PLANT_CAMERA, TWIN_STATE, MODEL_SNAPSHOT, CONTROL_SETPOINT)


def quantize_field(value: float) -> int:
    """Physical value to its 16-bit fixed-point count"""
    count = int(round(value * FIXED_POINT_SCALE))
    if abs(count) > FIELD_LIMIT:
        raise FieldOverflow(f"{value} does not fit a {FIXED_POINT_SCALE}x fixed-point field")
    return count


def _header_bytes(msg_type: int, robot_id: int, seq: int, timestamp: int,
                  counts: Sequence[int]) -> bytes:
    body = bytearray()
    body.append(msg_type & 0xFF)
    body.append(robot_id & 0xFF)
    body += (seq & 0xFFFF).to_bytes(2, 'big')
    body += (timestamp & 0xFFFFFFFF).to_bytes(4, 'big')
    body.append(len(counts))
    for count in counts:
        body += (count & 0xFFFF).to_bytes(2, 'big')
    return bytes(body)


def xor_checksum(data: bytes) -> int:
    checksum = 0
    for byte in data:
        checksum ^= byte
    return checksum


@dataclass(frozen=True)
class Frame:
    """
    One bus message. `counts` holds the raw fixed-point payload; `values`
    gives the physical numbers.
    """
    msg_type: int
    robot_id: int
    seq: int
    timestamp: int
    counts: Tuple[int, ...]
    checksum: int

    @classmethod
    def build(cls, msg_type: int, robot_id: int, timestamp: int, values: Iterable[float] = (),
              seq: int = 0) -> 'Frame':
        return cls.from_counts(msg_type, robot_id, timestamp,
                               [quantize_field(v) for v in values], seq)

    @classmethod
    def from_counts(cls, msg_type: int, robot_id: int, timestamp: int, counts: Iterable[int],
                    seq: int = 0) -> 'Frame':
        counts = tuple(int(c) for c in counts)
        if len(counts) > MAX_FIELDS:
            raise FieldOverflow(f"Frames carry at most {MAX_FIELDS} fields, got {len(counts)}")
        for count in counts:
            if abs(count) > FIELD_LIMIT:
                raise FieldOverflow(f"Raw field {count} exceeds 16-bit range")
        if not (0 <= msg_type <= 0xFF and 0 <= robot_id <= 0xFF):
            raise ValueError("msg_type and robot_id are single bytes")
        if not 0 <= timestamp <= 0xFFFFFFFF:
            raise ValueError("timestamp must fit 32 bits")
        seq = seq % SEQ_MODULUS
        checksum = xor_checksum(_header_bytes(msg_type, robot_id, seq, timestamp, counts))
        return cls(msg_type, robot_id, seq, timestamp, counts, checksum)

    @property
    def values(self) -> Tuple[float, ...]:
        return tuple(c / FIXED_POINT_SCALE for c in self.counts)

    def is_valid(self) -> bool:
        expected = _header_bytes(self.msg_type, self.robot_id, self.seq, self.timestamp, self.counts)
        return xor_checksum(expected) == self.checksum

    def with_seq(self, seq: int) -> 'Frame':
        return Frame.from_counts(self.msg_type, self.robot_id, self.timestamp, self.counts, seq)


def encode_frame(frame: Frame) -> str:
    if len(frame.counts) > MAX_FIELDS:
        raise FieldOverflow(f"Frames carry at most {MAX_FIELDS} fields")
    data = _header_bytes(frame.msg_type, frame.robot_id, frame.seq, frame.timestamp, frame.counts)
    return (data + bytes([frame.checksum & 0xFF])).hex().upper()


def decode_frame(text: str) -> Frame:
    if len(text) % 2 or not _HEX_RE.match(text):
        raise MalformedFrame(f"Not an even-length uppercase hex string: {text[:40]!r}")
    if len(text) < HEADER_CHARS + 2:
        raise MalformedFrame(f"Frame too short ({len(text)} chars)")

    data = bytes.fromhex(text)
    count = data[8]
    if count > MAX_FIELDS or len(data) != 9 + 2 * count + 1:
        raise MalformedFrame(f"Frame length {len(text)} does not match {count} fields")

    body, checksum = data[:-1], data[-1]
    if xor_checksum(body) != checksum:
        raise ChecksumMismatch(f"Checksum {checksum:02X} does not match frame bytes")

    fields = []
    for i in range(count):
        raw = int.from_bytes(body[9 + 2 * i: 11 + 2 * i], 'big', signed=True)
        fields.append(raw)
    return Frame(
        msg_type=body[0],
        robot_id=body[1],
        seq=int.from_bytes(body[2:4], 'big'),
        timestamp=int.from_bytes(body[4:8], 'big'),
        counts=tuple(fields),
        checksum=checksum,
    )


class Topic:
    """Ring buffer of frames; offsets count publications from 1"""

    def __init__(self, name: str, capacity: int):
        if capacity < 1:
            raise ValueError("Topic capacity must be at least 1")
        self.name = name
        self.capacity = capacity
        self.ring: Deque[Tuple[int, int, Frame]] = deque(maxlen=capacity)
        self.latest_offset = 0
        self._seq: Dict[int, int] = {}

    @property
    def oldest_offset(self) -> int:
        return self.ring[0][0] if self.ring else self.latest_offset + 1

    def append(self, frame: Frame, order: int) -> Frame:
        seq = self._seq.get(frame.robot_id, 0) + 1
        self._seq[frame.robot_id] = seq
        stamped = frame.with_seq(seq)
        self.latest_offset += 1
        self.ring.append((self.latest_offset, order, stamped))
        return stamped

    def get(self, cursor: int) -> Optional[Tuple[int, Frame]]:
        wanted = cursor + 1
        if wanted > self.latest_offset:
            return None
        oldest = self.oldest_offset
        if wanted < oldest:
            raise CursorLagged(self.name, cursor, oldest)
        offset, _, frame = self.ring[wanted - oldest]
        return offset, frame


class MessageBus:
    """Thread-safe topic registry; producers never wait on consumers"""

    def __init__(self, capacity: Optional[int] = None):
        self.capacity = capacity or getattr(settings, 'TESTBED_BUS_CAPACITY', 8192)
        # identifies this bus in persisted log markers
        self.bus_id = uuid.uuid4().hex
        self._topics: Dict[str, Topic] = {}
        self._lock = threading.Lock()
        self._order = 0
        self.snapshots = SnapshotRegister()

    def topic(self, name: str) -> Topic:
        with self._lock:
            if name not in self._topics:
                self._topics[name] = Topic(name, self.capacity)
            return self._topics[name]

    @property
    def topic_names(self) -> List[str]:
        with self._lock:
            return sorted(self._topics)

    def publish(self, topic: str, frame: Frame) -> int:
        """Append a frame; returns the sequence number assigned to it"""
        if not frame.is_valid():
            raise ChecksumMismatch(f"Refusing frame with bad checksum on '{topic}'")
        ring = self.topic(topic)
        with self._lock:
            self._order += 1
            stamped = ring.append(frame, self._order)
        return stamped.seq

    def publish_values(self, topic: str, msg_type: int, robot_id: int, timestamp: int,
                       values: Iterable[float]) -> int:
        return self.publish(topic, Frame.build(msg_type, robot_id, timestamp, values))

    def consume(self, topic: str, cursor: int = 0) -> Optional[Tuple[int, Frame]]:
        """Next frame strictly after `cursor`, as (offset, frame), or None"""
        ring = self.topic(topic)
        with self._lock:
            return ring.get(cursor)

    def consume_all(self, topic: str, cursor: int = 0) -> Tuple[List[Frame], int]:
        frames = []
        while True:
            item = self.consume(topic, cursor)
            if item is None:
                return frames, cursor
            cursor, frame = item
            frames.append(frame)

    def retained(self, topic_filter: str = '*') -> List[Tuple[int, str, int, Frame]]:
        """(publication order, topic, offset, frame) for every retained frame matching the filter"""
        with self._lock:
            rows = [
                (order, name, offset, frame)
                for name, ring in self._topics.items()
                if fnmatch.fnmatchcase(name, topic_filter)
                for offset, order, frame in ring.ring
            ]
        rows.sort(key=lambda row: row[0])
        return rows


class SnapshotRegister:
    """Latest-version store for model snapshots; swaps are atomic"""

    def __init__(self, keep: int = 8):
        self._lock = threading.Lock()
        self._by_version: Dict[int, object] = {}
        self._keep = keep
        self._latest = None

    def store(self, snapshot):
        with self._lock:
            self._by_version[snapshot.version] = snapshot
            for version in sorted(self._by_version)[:-self._keep]:
                del self._by_version[version]
            self._latest = snapshot

    def latest(self):
        with self._lock:
            return self._latest

    def get(self, version: int):
        with self._lock:
            return self._by_version.get(version)


def _decoded_line(timestamp: int, topic: str, frame: Frame) -> str:
    values = ' '.join(f"{v:.1f}" for v in frame.values)
    return (f"t={timestamp} topic={topic} type={frame.msg_type} robot={frame.robot_id} "
            f"seq={frame.seq} values=[{values}]")


def _read_marker(path: str) -> Optional[Dict]:
    if not os.path.exists(path):
        return None
    try:
        with open(path, 'r', encoding='ascii') as handle:
            marker = json.load(handle)
    except ValueError:
        logger.warning(f"Ignoring unreadable log marker {path}")
        return None
    if not isinstance(marker, dict) or not {'bus', 'log_bytes', 'decoded_bytes', 'offsets'} <= marker.keys():
        return None
    return marker


def _restore(path: str, size: int) -> bool:
    """Cut a file back to its committed size; False when it is already shorter"""
    with open(path, 'ab') as handle:
        if handle.tell() < size:
            return False
        handle.truncate(size)
    return True


def _write_marker(path: str, marker: Dict):
    partial = f"{path}.tmp"
    with open(partial, 'w', encoding='ascii') as handle:
        json.dump(marker, handle, indent=2, sort_keys=True)
    os.replace(partial, path)


def persist_log(bus: MessageBus, topic_filter: str, path: str) -> int:
    """
    Append retained frames to an append-only log and its decoded sidecar.

    Lines are `{timestamp},{topic},{hex frame}`. The `.marker` file commits
    what has been written: the id of the bus that wrote it, the byte size of
    both files and the last persisted publication offset per topic. Calling
    again with the same bus cuts any uncommitted or torn tail and appends only
    newer frames. A log written by another bus is started over. Returns the
    number of records written by this call.
    """
    marker_path = f"{path}.marker"
    sidecar_path = f"{path}.decoded"
    try:
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)

        marker = _read_marker(marker_path)
        resumed = (
            marker is not None and marker['bus'] == bus.bus_id
            and _restore(path, marker['log_bytes'])
            and _restore(sidecar_path, marker['decoded_bytes'])
        )
        if not resumed:
            if os.path.exists(path) and os.path.getsize(path):
                logger.info(f"Starting {path} over; it was written by another run")
            _restore(path, 0)
            _restore(sidecar_path, 0)
        offsets: Dict[str, int] = dict(marker['offsets']) if resumed else {}

        written = 0
        with open(path, 'a', encoding='ascii') as log, open(sidecar_path, 'a', encoding='ascii') as sidecar:
            for _, topic, offset, frame in bus.retained(topic_filter):
                if offset <= offsets.get(topic, 0):
                    continue
                log.write(f"{frame.timestamp},{topic},{encode_frame(frame)}\n")
                sidecar.write(_decoded_line(frame.timestamp, topic, frame) + '\n')
                offsets[topic] = offset
                written += 1

        _write_marker(marker_path, {
            'bus': bus.bus_id,
            'log_bytes': os.path.getsize(path),
            'decoded_bytes': os.path.getsize(sidecar_path),
            'offsets': offsets,
        })
    except OSError as e:
        logger.error(f"Failed to persist bus log to {path}: {e}")
        raise IoFailure(str(e)) from e

    logger.info(f"Persisted {written} frames matching '{topic_filter}' to {path}")
    return written


def read_log(path: str) -> List[Tuple[int, str, Frame]]:
    """Parse a persisted log back into (timestamp, topic, frame) rows"""
    rows = []
    try:
        with open(path, 'r', encoding='ascii') as handle:
            for line_number, line in enumerate(handle, 1):
                line = line.rstrip('\n')
                if not line:
                    continue
                parts = line.split(',')
                if len(parts) != 3:
                    raise MalformedFrame(f"{path}:{line_number} is not a log record")
                rows.append((int(parts[0]), parts[1], decode_frame(parts[2])))
    except OSError as e:
        raise IoFailure(str(e)) from e
    return rows
