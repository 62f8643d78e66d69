"""Binary wire protocol between the controller and the 15 fan-module endpoints.

Every frame is a fixed-length little-endian datagram:

    offset  size  field
    ------  ----  -----------------------------------------------
    0       2     magic  b"GW"
    2       1     version (currently 1)
    3       1     msg_type (SET_PWM=1, TACH_REPORT=2, PING=3, PONG=4)
    4       1     module_index (0..14)
    5       3     reserved, zero on encode, ignored on decode
    8       4     seq, unsigned 32-bit
    12      8     timestamp_us, unsigned 64-bit
    20      n     payload (18 bytes for SET_PWM / TACH_REPORT, else empty)
    20+n    2     CRC-16/CCITT-FALSE over bytes [0, 20+n)

SET_PWM carries 9 x u16 duty values in hundredths of a percent (0..10000);
TACH_REPORT carries 9 x u16 RPM values (0..4000).  Total frame lengths are
therefore 40 bytes (SET_PWM, TACH_REPORT) and 22 bytes (PING, PONG).

Commands are absolute setpoints, so retransmitting a SET_PWM is harmless.
Telemetry is best-effort; receivers account for loss with `seq_gap`.
docs/protocol.md carries the normative byte-layout table.

All functions here are pure and thread-safe.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

MAGIC = b"GW"
VERSION = 1
FANS_PER_MODULE = 9
MODULE_COUNT = 15
NUM_FANS = MODULE_COUNT * FANS_PER_MODULE
DUTY_MAX = 10000   # hundredths of a percent
RPM_MAX = 4000     # headroom over the 3600 nominal ceiling

_HEADER = struct.Struct("<2sBBB3xIQ")
_PAYLOAD9 = struct.Struct("<9H")
_CRC = struct.Struct("<H")

HEADER_LEN = _HEADER.size          # 20
PAYLOAD9_LEN = _PAYLOAD9.size      # 18


class MsgType(enum.IntEnum):
    SET_PWM = 1
    TACH_REPORT = 2
    PING = 3
    PONG = 4


# Payload length per message type; frame length = header + payload + crc.
PAYLOAD_LEN = {
    MsgType.SET_PWM: PAYLOAD9_LEN,
    MsgType.TACH_REPORT: PAYLOAD9_LEN,
    MsgType.PING: 0,
    MsgType.PONG: 0,
}


def frame_len(msg_type: MsgType) -> int:
    return HEADER_LEN + PAYLOAD_LEN[msg_type] + _CRC.size


class ProtocolError(Exception):
    """Base class for every decode/encode failure."""


class InvalidPayload(ProtocolError):
    pass


class BadMagic(ProtocolError):
    pass


class BadVersion(ProtocolError):
    pass


class BadCrc(ProtocolError):
    pass


class Truncated(ProtocolError):
    """Frame length does not match the fixed length for its message type."""


class UnknownType(ProtocolError):
    pass


# CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection, no final xor.
# Check value: crc16(b"123456789") == 0x29B1.
def _crc_table() -> tuple[int, ...]:
    table = []
    for byte in range(256):
        crc = byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ 0x1021) if crc & 0x8000 else (crc << 1)
            crc &= 0xFFFF
        table.append(crc)
    return tuple(table)


_CRC_TABLE = _crc_table()


def crc16(data: bytes, crc: int = 0xFFFF) -> int:
    for b in data:
        crc = ((crc << 8) & 0xFFFF) ^ _CRC_TABLE[((crc >> 8) ^ b) & 0xFF]
    return crc


@dataclass(frozen=True)
class FanId:
    """Address of one fan: module 0..14, fan 0..8 within the module."""

    module_index: int
    fan_index: int

    def __post_init__(self) -> None:
        if not 0 <= self.module_index < MODULE_COUNT:
            raise ValueError(f"module_index {self.module_index} not in 0..14")
        if not 0 <= self.fan_index < FANS_PER_MODULE:
            raise ValueError(f"fan_index {self.fan_index} not in 0..8")

    @property
    def global_index(self) -> int:
        return self.module_index * FANS_PER_MODULE + self.fan_index

    @classmethod
    def from_global(cls, index: int) -> "FanId":
        if not 0 <= index < NUM_FANS:
            raise ValueError(f"global fan index {index} not in 0..134")
        return cls(index // FANS_PER_MODULE, index % FANS_PER_MODULE)


@dataclass(frozen=True)
class SetPwm:
    """Absolute duty setpoints for a module's 9 fans, hundredths of a percent."""

    duties: tuple[int, ...]


@dataclass(frozen=True)
class TachReport:
    """Measured RPM of a module's 9 fans."""

    rpms: tuple[int, ...]


Payload = SetPwm | TachReport | None


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    module_index: int
    seq: int
    timestamp_us: int
    payload: Payload = None


def set_pwm(module_index: int, duties, seq: int, timestamp_us: int = 0) -> Frame:
    return Frame(MsgType.SET_PWM, module_index, seq, timestamp_us,
                 SetPwm(tuple(int(d) for d in duties)))


def tach_report(module_index: int, rpms, seq: int, timestamp_us: int = 0) -> Frame:
    return Frame(MsgType.TACH_REPORT, module_index, seq, timestamp_us,
                 TachReport(tuple(int(r) for r in rpms)))


def ping(module_index: int, seq: int, timestamp_us: int = 0) -> Frame:
    return Frame(MsgType.PING, module_index, seq, timestamp_us)


def pong(module_index: int, seq: int, timestamp_us: int = 0) -> Frame:
    return Frame(MsgType.PONG, module_index, seq, timestamp_us)


def _check_u9(values: tuple[int, ...], limit: int, what: str) -> None:
    if len(values) != FANS_PER_MODULE:
        raise InvalidPayload(f"expected {FANS_PER_MODULE} {what} values, got {len(values)}")
    for v in values:
        if not isinstance(v, int) or not 0 <= v <= limit:
            raise InvalidPayload(f"{what} {v!r} not in 0..{limit}")


def encode_frame(msg: Frame) -> bytes:
    """Encode a frame to its fixed-length byte image.

    Raises InvalidPayload if any field violates its range or the payload
    does not match the message type.
    """
    try:
        msg_type = MsgType(msg.msg_type)
    except ValueError:
        raise InvalidPayload(f"unknown msg_type {msg.msg_type!r}") from None
    if not 0 <= msg.module_index < MODULE_COUNT:
        raise InvalidPayload(f"module_index {msg.module_index} not in 0..14")
    if not 0 <= msg.seq < 2**32:
        raise InvalidPayload(f"seq {msg.seq} not a u32")
    if not 0 <= msg.timestamp_us < 2**64:
        raise InvalidPayload(f"timestamp_us {msg.timestamp_us} not a u64")

    if msg_type is MsgType.SET_PWM:
        if not isinstance(msg.payload, SetPwm):
            raise InvalidPayload("SET_PWM frame requires a SetPwm payload")
        _check_u9(msg.payload.duties, DUTY_MAX, "duty")
        body = _PAYLOAD9.pack(*msg.payload.duties)
    elif msg_type is MsgType.TACH_REPORT:
        if not isinstance(msg.payload, TachReport):
            raise InvalidPayload("TACH_REPORT frame requires a TachReport payload")
        _check_u9(msg.payload.rpms, RPM_MAX, "rpm")
        body = _PAYLOAD9.pack(*msg.payload.rpms)
    else:
        if msg.payload is not None:
            raise InvalidPayload(f"{msg_type.name} frame carries no payload")
        body = b""

    head = _HEADER.pack(MAGIC, VERSION, msg_type, msg.module_index,
                        msg.seq, msg.timestamp_us)
    image = head + body
    return image + _CRC.pack(crc16(image))


def decode_frame(data: bytes) -> Frame:
    """Decode a byte image back into a Frame.

    Total on any input: raises a ProtocolError subclass (BadMagic,
    BadVersion, UnknownType, Truncated, BadCrc) rather than failing in any
    other way.  decode_frame(encode_frame(f)) == f for every valid f.
    """
    data = bytes(data)
    if len(data) < 2:
        raise Truncated(f"{len(data)} bytes, need at least 2 for magic")
    if data[:2] != MAGIC:
        raise BadMagic(f"magic {data[:2]!r}")
    if len(data) < HEADER_LEN + _CRC.size:
        raise Truncated(f"{len(data)} bytes, header needs {HEADER_LEN + _CRC.size}")
    magic, version, raw_type, module_index, seq, timestamp_us = _HEADER.unpack_from(data)
    if version != VERSION:
        raise BadVersion(f"version {version}, expected {VERSION}")
    try:
        msg_type = MsgType(raw_type)
    except ValueError:
        raise UnknownType(f"msg_type {raw_type}") from None
    expected = frame_len(msg_type)
    if len(data) != expected:
        raise Truncated(f"{msg_type.name} frame is {expected} bytes, got {len(data)}")
    (crc,) = _CRC.unpack_from(data, expected - _CRC.size)
    if crc != crc16(data[: expected - _CRC.size]):
        raise BadCrc(f"crc 0x{crc:04x}")
    if module_index >= MODULE_COUNT:
        raise InvalidPayload(f"module_index {module_index} not in 0..14")

    payload: Payload = None
    if msg_type is MsgType.SET_PWM:
        duties = _PAYLOAD9.unpack_from(data, HEADER_LEN)
        if max(duties) > DUTY_MAX:
            raise InvalidPayload(f"duty {max(duties)} exceeds {DUTY_MAX}")
        payload = SetPwm(duties)
    elif msg_type is MsgType.TACH_REPORT:
        rpms = _PAYLOAD9.unpack_from(data, HEADER_LEN)
        if max(rpms) > RPM_MAX:
            raise InvalidPayload(f"rpm {max(rpms)} exceeds {RPM_MAX}")
        payload = TachReport(rpms)
    return Frame(msg_type, module_index, seq, timestamp_us, payload)


def seq_gap(prev: int, next: int) -> int:
    """Frames lost between two consecutive received sequence numbers.

    next - prev - 1 with unsigned 32-bit wraparound, so (0xFFFFFFFF, 1) -> 1.
    """
    return (next - prev - 1) % 2**32
