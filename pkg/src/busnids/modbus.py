"""Modbus TCP framing: MBAP header + PDU parsing, encoding and function-code classification.

Only header-level information is extracted. The PDU payload after the
function code is carried as opaque bytes and never interpreted, so the
rest of the pipeline works even when register data is meaningless or
encrypted.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

MODBUS_TCP_PORT = 502

MBAP_STRUCT = struct.Struct(">HHHB")
# tid, pid, length, uid; length counts uid + PDU, so a full ADU is 6 + length bytes.
MBAP_SIZE = 7
MIN_ADU_SIZE = 8  # MBAP + function code

EXCEPTION_BIT = 0x80


class Direction(Enum):
    TO_SLAVE = "to_slave"
    TO_MASTER = "to_master"


class FunctionClass(Enum):
    DATA_ACCESS_READ = "data_access_read"
    DATA_ACCESS_WRITE = "data_access_write"
    FILE_RECORD_READ = "file_record_read"
    FILE_RECORD_WRITE = "file_record_write"
    EXCEPTION_RESPONSE = "exception_response"
    UNKNOWN = "unknown"


READ_CODES = frozenset({1, 2, 3, 4, 24})
WRITE_CODES = frozenset({5, 6, 15, 16, 22, 23})
FILE_READ_CODE = 20
FILE_WRITE_CODE = 21


class ParseError(Exception):
    """A TCP payload that is not a well-formed Modbus TCP ADU.

    Instances double as stream items: the risk scorer accepts them in
    place of a frame, so malformed traffic still gets scored.
    """

    reason = "parse_error"

    def __init__(self, message: str, *, timestamp: int = 0,
                 raw: bytes = b""):
        super().__init__(message)
        self.timestamp = timestamp
        self.raw = raw


class TooShort(ParseError):
    reason = "too_short"


class BadProtocolId(ParseError):
    reason = "bad_protocol_id"


class LengthMismatch(ParseError):
    reason = "length_mismatch"


class InvariantViolation(ValueError):
    """Frame fields are mutually inconsistent and cannot be encoded."""


@dataclass(frozen=True)
class MbapHeader:
    transaction_id: int
    protocol_id: int
    length: int
    unit_id: int


@dataclass(frozen=True)
class ModbusFrame:
    header: MbapHeader
    function_code: int
    pdu_payload: bytes
    direction: Direction
    timestamp: int  # microseconds since epoch
    src: tuple[str, int] = ("0.0.0.0", 0)
    dst: tuple[str, int] = ("0.0.0.0", 0)

    @property
    def is_exception_response(self) -> bool:
        return bool(self.function_code & EXCEPTION_BIT) and \
            self.direction is Direction.TO_MASTER


def make_frame(transaction_id: int, unit_id: int, function_code: int,
               pdu_payload: bytes = b"", *,
               direction: Direction = Direction.TO_SLAVE,
               timestamp: int = 0,
               src: tuple[str, int] = ("0.0.0.0", 0),
               dst: tuple[str, int] = ("0.0.0.0", 0)) -> ModbusFrame:
    """Build a frame with the MBAP length derived from the payload."""
    header = MbapHeader(transaction_id, 0, 2 + len(pdu_payload), unit_id)
    return ModbusFrame(header, function_code, bytes(pdu_payload),
                       direction, timestamp, src, dst)


def parse_frame(raw: bytes, direction: Direction, timestamp: int = 0,
                src: tuple[str, int] = ("0.0.0.0", 0),
                dst: tuple[str, int] = ("0.0.0.0", 0)) -> ModbusFrame:
    """Parse one complete ADU from ``raw``.

    Raises TooShort, BadProtocolId or LengthMismatch; nothing else is
    rejected. Payload bytes are kept verbatim and never inspected.
    """
    if len(raw) < MIN_ADU_SIZE:
        raise TooShort(f"ADU is {len(raw)} bytes, need at least {MIN_ADU_SIZE}",
                       timestamp=timestamp, raw=raw)
    tid, pid, length, uid = MBAP_STRUCT.unpack_from(raw)
    if pid != 0:
        raise BadProtocolId(f"protocol id {pid}, expected 0",
                            timestamp=timestamp, raw=raw)
    if length < 2 or MBAP_SIZE - 1 + length != len(raw):
        raise LengthMismatch(
            f"declared length {length} disagrees with {len(raw)} available bytes",
            timestamp=timestamp, raw=raw)
    function_code = raw[MBAP_SIZE]
    payload = raw[MIN_ADU_SIZE:]
    header = MbapHeader(tid, pid, length, uid)
    return ModbusFrame(header, function_code, payload, direction,
                       timestamp, src, dst)


def encode_frame(frame: ModbusFrame) -> bytes:
    """Serialize a frame; inverse of parse_frame for every valid frame."""
    header = frame.header
    if header.length != 2 + len(frame.pdu_payload):
        raise InvariantViolation(
            f"header length {header.length} inconsistent with "
            f"{len(frame.pdu_payload)}-byte payload")
    return MBAP_STRUCT.pack(header.transaction_id, header.protocol_id,
                            header.length, header.unit_id) + \
        bytes([frame.function_code]) + frame.pdu_payload


def iter_adus(payload: bytes, direction: Direction, timestamp: int = 0,
              src: tuple[str, int] = ("0.0.0.0", 0),
              dst: tuple[str, int] = ("0.0.0.0", 0)):
    """Greedily split a TCP segment payload into ADUs, front to back.

    Yields ModbusFrame or ParseError items. A trailing partial ADU
    yields TooShort. A declared length below the minimum makes the rest
    of the segment undecodable; it is consumed as one LengthMismatch.
    """
    offset = 0
    n = len(payload)
    while offset < n:
        rest = payload[offset:]
        if len(rest) < MIN_ADU_SIZE:
            yield TooShort(f"trailing {len(rest)} bytes, need {MIN_ADU_SIZE}",
                           timestamp=timestamp, raw=rest)
            return
        length = struct.unpack_from(">H", rest, 4)[0]
        if length < 2:
            yield LengthMismatch(f"declared length {length} below minimum 2",
                                 timestamp=timestamp, raw=rest)
            return
        end = MBAP_SIZE - 1 + length
        if end > len(rest):
            yield TooShort(
                f"partial ADU: declared {end} bytes, {len(rest)} available",
                timestamp=timestamp, raw=rest)
            return
        chunk = rest[:end]
        try:
            yield parse_frame(chunk, direction, timestamp, src, dst)
        except ParseError as err:
            yield err
        offset += end


def classify_function(function_code: int, direction: Direction) -> FunctionClass:
    """Total classification of every (code, direction) combination."""
    if function_code & EXCEPTION_BIT and direction is Direction.TO_MASTER:
        return FunctionClass.EXCEPTION_RESPONSE
    if function_code in READ_CODES:
        return FunctionClass.DATA_ACCESS_READ
    if function_code in WRITE_CODES:
        return FunctionClass.DATA_ACCESS_WRITE
    if function_code == FILE_READ_CODE:
        return FunctionClass.FILE_RECORD_READ
    if function_code == FILE_WRITE_CODE:
        return FunctionClass.FILE_RECORD_WRITE
    return FunctionClass.UNKNOWN


def is_erroneous(item: ModbusFrame | ParseError) -> bool:
    """True for parse failures, exception responses and unknown codes.

    These are the only error signals visible from ADU/PDU headers alone.
    """
    if isinstance(item, ParseError):
        return True
    cls = classify_function(item.function_code, item.direction)
    return cls in (FunctionClass.EXCEPTION_RESPONSE, FunctionClass.UNKNOWN)
