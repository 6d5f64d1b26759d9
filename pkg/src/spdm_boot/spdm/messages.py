"""SPDM message codec.

Wire layout of every message::

    version major (1) | version minor (1) | kind code (1) | param1 (1) | param2 (1) | body

Kind codes follow the DMTF request/response code assignments: requests have
bit 7 set, responses have it clear. Body layouts are documented on the
``*_body`` helpers below. Multi-byte integers are little-endian.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from .errors import DecodeError, TruncatedMessage, UnknownKind

HEADER_SIZE = 5
NONCE_SIZE = 32
REQUEST_BIT = 0x80


class Kind(enum.IntEnum):
    GET_DIGESTS = 0x81
    GET_CERTIFICATE = 0x82
    CHALLENGE = 0x83
    GET_VERSION = 0x84
    GET_MEASUREMENTS = 0xE0
    GET_CAPABILITIES = 0xE1
    NEGOTIATE_ALGORITHMS = 0xE3
    KEY_EXCHANGE = 0xE4
    FINISH = 0xE5
    # Requester -> responder wrapper around a response to an encapsulated request.
    ENCAPSULATED_RESPONSE = 0xEB

    DIGESTS = 0x01
    CERTIFICATE = 0x02
    CHALLENGE_AUTH = 0x03
    VERSION = 0x04
    MEASUREMENTS = 0x60
    CAPABILITIES = 0x61
    ALGORITHMS = 0x63
    KEY_EXCHANGE_RSP = 0x64
    FINISH_RSP = 0x65
    # Responder -> requester wrapper around a request issued by the responder.
    ENCAPSULATED_REQUEST = 0x6A
    ERROR = 0x7F

    @property
    def is_request(self) -> bool:
        return bool(self & REQUEST_BIT)


RESPONSE_FOR = {
    Kind.GET_VERSION: Kind.VERSION,
    Kind.GET_CAPABILITIES: Kind.CAPABILITIES,
    Kind.NEGOTIATE_ALGORITHMS: Kind.ALGORITHMS,
    Kind.GET_DIGESTS: Kind.DIGESTS,
    Kind.GET_CERTIFICATE: Kind.CERTIFICATE,
    Kind.CHALLENGE: Kind.CHALLENGE_AUTH,
    Kind.GET_MEASUREMENTS: Kind.MEASUREMENTS,
    Kind.KEY_EXCHANGE: Kind.KEY_EXCHANGE_RSP,
    Kind.FINISH: Kind.FINISH_RSP,
    Kind.ENCAPSULATED_RESPONSE: Kind.ENCAPSULATED_REQUEST,
}

# Smallest legal body per kind; shorter bodies are rejected as truncated.
MIN_BODY = {
    Kind.VERSION: 1,
    Kind.GET_CAPABILITIES: 5,
    Kind.CAPABILITIES: 5,
    Kind.NEGOTIATE_ALGORITHMS: 13,
    Kind.ALGORITHMS: 13,
    Kind.GET_CERTIFICATE: 4,
    Kind.CERTIFICATE: 4,
    Kind.CHALLENGE: NONCE_SIZE,
    Kind.GET_MEASUREMENTS: NONCE_SIZE,
    Kind.MEASUREMENTS: 1 + NONCE_SIZE,
    Kind.KEY_EXCHANGE: 2 + NONCE_SIZE + 2,
    Kind.KEY_EXCHANGE_RSP: 2 + NONCE_SIZE + 2,
    Kind.ERROR: 4,
}

Version = tuple[int, int]


@dataclass(frozen=True)
class SpdmMessage:
    kind: Kind
    version: Version = (1, 0)
    param1: int = 0
    param2: int = 0
    body: bytes = b""

    @property
    def is_request(self) -> bool:
        return self.kind.is_request

    def encode(self) -> bytes:
        return encode_message(self)


def encode_message(msg: SpdmMessage) -> bytes:
    major, minor = msg.version
    return bytes([major, minor, int(msg.kind), msg.param1, msg.param2]) + bytes(msg.body)


def decode_message(data: bytes) -> SpdmMessage:
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        raise TruncatedMessage(f"message of {len(data)} bytes is shorter than the header")
    major, minor, code, p1, p2 = data[:HEADER_SIZE]
    try:
        kind = Kind(code)
    except ValueError:
        raise UnknownKind(f"unknown kind code 0x{code:02X}") from None
    body = data[HEADER_SIZE:]
    if len(body) < MIN_BODY.get(kind, 0):
        raise TruncatedMessage(f"{kind.name} body of {len(body)} bytes is truncated")
    return SpdmMessage(kind, (major, minor), p1, p2, body)


# --- body helpers -------------------------------------------------------------

class Reader:
    """Sequential reader raising TruncatedMessage on short input."""

    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedMessage(f"need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def rest(self) -> bytes:
        return self.take(len(self.data) - self.pos)

    def done(self) -> None:
        if self.pos != len(self.data):
            raise DecodeError(f"{len(self.data) - self.pos} trailing bytes")


def version_body(versions: list[Version]) -> bytes:
    """count (1) | count × (major, minor)."""
    return bytes([len(versions)]) + b"".join(bytes(v) for v in versions)


def parse_version_body(body: bytes) -> list[Version]:
    r = Reader(body)
    count = r.u8()
    out = [tuple(r.take(2)) for _ in range(count)]
    r.done()
    return out


def capabilities_body(ct_exponent: int, flags: int) -> bytes:
    """ct_exponent (1) | flags (4)."""
    return struct.pack("<BI", ct_exponent, flags)


def parse_capabilities_body(body: bytes) -> tuple[int, int]:
    r = Reader(body)
    out = (r.u8(), r.u32())
    r.done()
    return out


def algorithms_body(measurement_spec: int, asym: int, hash_: int, aead: int, dhe: int) -> bytes:
    """measurement_spec (1) | base_asym (4) | base_hash (4) | aead (2) | dhe (2).

    Used both for the requester's advertised masks and the responder's selection.
    """
    return struct.pack("<BIIHH", measurement_spec, asym, hash_, aead, dhe)


def parse_algorithms_body(body: bytes) -> tuple[int, int, int, int, int]:
    r = Reader(body)
    out = (r.u8(), r.u32(), r.u32(), r.u16(), r.u16())
    r.done()
    return out


def get_certificate_body(offset: int, length: int) -> bytes:
    return struct.pack("<HH", offset, length)


def certificate_body(portion: bytes, remainder: int) -> bytes:
    """portion_length (2) | remainder_length (2) | portion."""
    return struct.pack("<HH", len(portion), remainder) + portion


def parse_certificate_body(body: bytes) -> tuple[bytes, int]:
    r = Reader(body)
    length, remainder = r.u16(), r.u16()
    portion = r.take(length)
    r.done()
    return portion, remainder


def error_message(code: int, version: Version = (1, 0)) -> SpdmMessage:
    return SpdmMessage(Kind.ERROR, version, 0xFF, 0, struct.pack("<I", code))


def error_code(msg: SpdmMessage) -> int:
    return struct.unpack("<I", msg.body[:4])[0]
