"""Transport bindings that carry SPDM messages to devices.

Three framings are provided:

* TPM command encapsulation: ``tag (2, BE) | size (4, BE) | payload`` where
  ``size`` counts the whole frame and the tag is 0x8101 (clear) or 0x8201
  (secured).
* PCI DOE data objects: an 8-byte header (vendor id, object type, 18-bit
  length in dwords), a 4-byte little-endian true payload length, the payload,
  and zero padding to a dword boundary.
* USB control transfers with vendor request 0x32. Requests are prefixed by a
  one-byte MCTP message type and split into chunks addressed by ``wIndex``.
  Responses are served as ``wTotalSize (2, LE) | MCTP type | SPDM message``;
  ``wTotalSize`` counts the bytes after the size field.

The host side of each framing is a binding with ``send_request`` and
``receive_response``. A :class:`Tap` attached to a binding observes (and may
rewrite) every SPDM message and every frame.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Protocol


class TransportError(Exception):
    pass


class FrameError(TransportError, ValueError):
    """A frame failed to decode (bad length, tag or type)."""


class Overflow(TransportError):
    pass


class Stall(TransportError):
    """The USB device stalled the control pipe."""


class ProtocolError(TransportError):
    pass


# --- TPM ---------------------------------------------------------------------------

TPM_TAG_CLEAR = 0x8101
TPM_TAG_SECURE = 0x8201
TPM_TAG_RSP_ERROR = 0x8001
TPM_RC_BAD_TAG = 0x01E
TPM_HEADER_SIZE = 6


def tpm_encode(payload: bytes, secured: bool = False) -> bytes:
    tag = TPM_TAG_SECURE if secured else TPM_TAG_CLEAR
    return struct.pack(">HI", tag, TPM_HEADER_SIZE + len(payload)) + bytes(payload)


def tpm_decode(frame: bytes) -> tuple[bytes, bool]:
    frame = bytes(frame)
    if len(frame) < TPM_HEADER_SIZE:
        raise FrameError(f"TPM frame of {len(frame)} bytes is shorter than its header")
    tag, size = struct.unpack(">HI", frame[:TPM_HEADER_SIZE])
    if tag not in (TPM_TAG_CLEAR, TPM_TAG_SECURE):
        raise FrameError(f"unknown TPM tag 0x{tag:04X}")
    if size != len(frame):
        raise FrameError(f"TPM size field {size} != frame length {len(frame)}")
    return frame[TPM_HEADER_SIZE:], tag == TPM_TAG_SECURE


def tpm_error_response(rc: int = TPM_RC_BAD_TAG) -> bytes:
    return struct.pack(">HII", TPM_TAG_RSP_ERROR, 10, rc)


# --- PCI DOE -----------------------------------------------------------------------

DOE_VENDOR_ID = 0x0001
DOE_TYPE_DISCOVERY = 0x00
DOE_TYPE_SPDM = 0x01
DOE_TYPE_SECURED_SPDM = 0x02
DOE_HEADER_SIZE = 8
DOE_TRUE_LENGTH_SIZE = 4
DOE_MAX_DWORDS = (1 << 18) - 1


@dataclass(frozen=True)
class DoeHeader:
    vendor_id: int
    data_object_type: int
    length_dwords: int
    reserved: int = 0

    def pack(self) -> bytes:
        if not 2 <= self.length_dwords <= DOE_MAX_DWORDS:
            raise FrameError(f"DOE length {self.length_dwords} dwords out of range")
        return struct.pack("<HBBI", self.vendor_id, self.data_object_type, self.reserved,
                           self.length_dwords)

    @classmethod
    def unpack(cls, data: bytes) -> "DoeHeader":
        if len(data) < DOE_HEADER_SIZE:
            raise FrameError("DOE header truncated")
        vendor, type_, reserved, length = struct.unpack("<HBBI", bytes(data[:DOE_HEADER_SIZE]))
        # Upper 14 bits of the second dword are reserved.
        return cls(vendor, type_, length & DOE_MAX_DWORDS, reserved)

    @property
    def size(self) -> int:
        return self.length_dwords * 4


def doe_encode(payload: bytes, secured: bool = False) -> bytes:
    payload = bytes(payload)
    body = struct.pack("<I", len(payload)) + payload
    body += bytes(-len(body) % 4)
    dwords = (DOE_HEADER_SIZE + len(body)) // 4
    if dwords > DOE_MAX_DWORDS:
        raise FrameError(f"payload of {len(payload)} bytes exceeds the DOE length field")
    header = DoeHeader(DOE_VENDOR_ID, DOE_TYPE_SECURED_SPDM if secured else DOE_TYPE_SPDM, dwords)
    return header.pack() + body


def doe_decode(obj: bytes) -> tuple[bytes, bool]:
    obj = bytes(obj)
    header = DoeHeader.unpack(obj)
    if header.size != len(obj):
        raise FrameError(f"DOE length {header.size} bytes != object length {len(obj)}")
    if header.vendor_id != DOE_VENDOR_ID or header.data_object_type not in (DOE_TYPE_SPDM,
                                                                           DOE_TYPE_SECURED_SPDM):
        raise FrameError(f"unknown DOE data object type {header.vendor_id:#06x}/{header.data_object_type:#04x}")
    secured = header.data_object_type == DOE_TYPE_SECURED_SPDM
    if len(obj) == DOE_HEADER_SIZE:
        return b"", secured
    if len(obj) < DOE_HEADER_SIZE + DOE_TRUE_LENGTH_SIZE:
        raise FrameError("DOE object truncated before its length field")
    true_len = struct.unpack("<I", obj[DOE_HEADER_SIZE:DOE_HEADER_SIZE + 4])[0]
    start = DOE_HEADER_SIZE + DOE_TRUE_LENGTH_SIZE
    padding = len(obj) - start - true_len
    if not 0 <= padding < 4 or any(obj[start + true_len:]):
        raise FrameError(f"DOE true length {true_len} disagrees with object size {len(obj)}")
    return obj[start:start + true_len], secured


class DoeMailbox:
    """Circular write mailbox plus a read mailbox holding the last response object."""

    def __init__(self, capacity: int = 4096, start: int = 0):
        if capacity < DOE_HEADER_SIZE:
            raise ValueError("mailbox capacity below one header")
        self.capacity = capacity
        self.write_buffer = bytearray(capacity)
        self.write_index = start % capacity
        self.first_header_offset = self.write_index
        self.pending = 0
        self.read_buffer = b""
        self.status = "idle"

    def write(self, chunk: bytes) -> "DoeMailbox":
        chunk = bytes(chunk)
        if len(chunk) > self.capacity - self.pending:
            raise Overflow(f"{len(chunk)} bytes do not fit ({self.capacity - self.pending} free)")
        if self.pending == 0:
            self.first_header_offset = self.write_index
        first = min(len(chunk), self.capacity - self.write_index)
        self.write_buffer[self.write_index:self.write_index + first] = chunk[:first]
        self.write_buffer[:len(chunk) - first] = chunk[first:]
        self.write_index = (self.write_index + len(chunk)) % self.capacity
        self.pending += len(chunk)
        return self

    def _peek(self, n: int) -> bytes:
        start = self.first_header_offset
        end = start + n
        if end <= self.capacity:
            return bytes(self.write_buffer[start:end])
        return bytes(self.write_buffer[start:]) + bytes(self.write_buffer[:end - self.capacity])

    def current_header(self) -> DoeHeader | None:
        if self.pending < DOE_HEADER_SIZE:
            return None
        return DoeHeader.unpack(self._peek(DOE_HEADER_SIZE))

    def object_ready(self) -> bool:
        header = self.current_header()
        return header is not None and DOE_HEADER_SIZE <= header.size <= self.pending

    def take_object(self) -> bytes:
        """Remove the object at ``first_header_offset`` and return its bytes."""
        header = self.current_header()
        if header is None or header.size > self.pending or header.size < DOE_HEADER_SIZE:
            raise ProtocolError("no complete data object in the mailbox")
        obj = self._peek(header.size)
        self.first_header_offset = (self.first_header_offset + header.size) % self.capacity
        self.pending -= header.size
        return obj


def doe_mailbox_write(mailbox: DoeMailbox, chunk: bytes) -> DoeMailbox:
    return mailbox.write(chunk)


# --- USB ---------------------------------------------------------------------------

USB_SPDM_REQUEST = 0x32
BM_HOST_TO_DEVICE = 0x00
BM_DEVICE_TO_HOST = 0x80
MCTP_TYPE_SPDM = 0x05
MCTP_TYPE_SECURED_SPDM = 0x06
USB_SIZE_PREFIX = 2
DEFAULT_CHUNK = 64


@dataclass(frozen=True)
class UsbSetupPacket:
    bmRequestType: int
    bRequest: int
    wValue: int
    wIndex: int
    wLength: int

    def pack(self) -> bytes:
        return struct.pack("<BBHHH", self.bmRequestType, self.bRequest, self.wValue,
                           self.wIndex, self.wLength)

    @classmethod
    def unpack(cls, data: bytes) -> "UsbSetupPacket":
        if len(data) != 8:
            raise FrameError("setup packet must be 8 bytes")
        return cls(*struct.unpack("<BBHHH", bytes(data)))

    @property
    def is_spdm(self) -> bool:
        return self.bRequest == USB_SPDM_REQUEST and self.wValue == 0


def spdm_setup(direction_in: bool, offset: int, length: int) -> UsbSetupPacket:
    return UsbSetupPacket(BM_DEVICE_TO_HOST if direction_in else BM_HOST_TO_DEVICE,
                          USB_SPDM_REQUEST, 0, offset, length)


def pack_device_to_host_header(total_size: int, setup: UsbSetupPacket) -> bytes:
    """wTotalSize at 0, then the setup fields packed contiguously (offsets 2,3,4,6,8)."""
    return struct.pack("<H", total_size) + setup.pack()


def unpack_device_to_host_header(data: bytes) -> tuple[int, UsbSetupPacket]:
    if len(data) != 10:
        raise FrameError("device-to-host header must be 10 bytes")
    return struct.unpack("<H", data[:2])[0], UsbSetupPacket.unpack(data[2:])


def mctp_wrap(spdm: bytes, secured: bool = False) -> bytes:
    return bytes([MCTP_TYPE_SECURED_SPDM if secured else MCTP_TYPE_SPDM]) + bytes(spdm)


def mctp_unwrap(data: bytes) -> tuple[bytes, bool]:
    if not data:
        raise FrameError("empty MCTP message")
    if data[0] not in (MCTP_TYPE_SPDM, MCTP_TYPE_SECURED_SPDM):
        raise FrameError(f"unknown MCTP message type 0x{data[0]:02X}")
    return bytes(data[1:]), data[0] == MCTP_TYPE_SECURED_SPDM


def usb_chunks(spdm: bytes, chunk_limit: int = DEFAULT_CHUNK,
               secured: bool = False) -> list[tuple[UsbSetupPacket, bytes]]:
    """Host-to-device transfers carrying one MCTP-wrapped message."""
    if chunk_limit <= 0:
        raise ValueError("chunk limit must be positive")
    wrapped = mctp_wrap(spdm, secured)
    if len(wrapped) > 0xFFFF:
        raise FrameError("message too large for 16-bit wIndex addressing")
    return [(spdm_setup(False, off, len(wrapped[off:off + chunk_limit])), wrapped[off:off + chunk_limit])
            for off in range(0, len(wrapped), chunk_limit)]


def usb_reassemble(transfers: list[tuple[UsbSetupPacket, bytes]]) -> tuple[bytes, bool]:
    buf = bytearray()
    for setup, data in transfers:
        if not setup.is_spdm or setup.bmRequestType != BM_HOST_TO_DEVICE:
            raise FrameError("not an SPDM host-to-device transfer")
        if setup.wIndex != len(buf) or setup.wLength != len(data):
            raise FrameError(f"transfer at wIndex {setup.wIndex} (length {setup.wLength}) "
                             f"does not continue {len(buf)} reassembled bytes")
        buf += data
    return mctp_unwrap(bytes(buf))


def usb_serve_buffer(spdm: bytes, secured: bool = False) -> bytes:
    """Device-side response buffer: wTotalSize | MCTP type | SPDM."""
    wrapped = mctp_wrap(spdm, secured)
    return struct.pack("<H", len(wrapped)) + wrapped


def usb_read_plan(total_size: int, chunk_limit: int = DEFAULT_CHUNK) -> list[tuple[int, int]]:
    """(wIndex, wLength) of each data read following the 2-byte size read."""
    return [(USB_SIZE_PREFIX + off, min(chunk_limit, total_size - off))
            for off in range(0, total_size, chunk_limit)]


class UsbControlEndpoint(Protocol):
    def control(self, setup: UsbSetupPacket, data: bytes = b"") -> bytes: ...


# --- tap ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrameRecord:
    direction: str  # "out" (host to device) or "in"
    binding: str
    length: int
    head_hex: str

    def as_dict(self) -> dict:
        return {"direction": self.direction, "binding": self.binding,
                "length": self.length, "head": self.head_hex}


@dataclass
class Tap:
    """Observes every SPDM message and frame on a binding; optional rewriting hooks.

    ``modify_message(direction, data)`` and ``modify_frame(binding, direction, data)``
    return the bytes to deliver instead.
    """

    modify_message: Callable[[str, bytes], bytes] | None = None
    modify_frame: Callable[[str, str, bytes], bytes] | None = None
    frames: list[FrameRecord] = field(default_factory=list)
    messages: list[tuple[str, bytes]] = field(default_factory=list)

    def message(self, direction: str, data: bytes) -> bytes:
        if self.modify_message is not None:
            data = bytes(self.modify_message(direction, data))
        self.messages.append((direction, data))
        return data

    def frame(self, binding: str, direction: str, data: bytes) -> bytes:
        if self.modify_frame is not None:
            data = bytes(self.modify_frame(binding, direction, data))
        self.frames.append(FrameRecord(direction, binding, len(data), data[:16].hex()))
        return data

    @property
    def requests_sent(self) -> int:
        return sum(1 for d, _ in self.messages if d == "request")

    def count(self, code: int) -> int:
        """Requests whose SPDM kind byte equals ``code``."""
        return sum(1 for d, m in self.messages if d == "request" and len(m) > 2 and m[2] == code)


# --- host-side bindings --------------------------------------------------------------

class Binding:
    name = "abstract"

    def __init__(self, tap: Tap | None = None):
        self.tap = tap if tap is not None else Tap()
        self.frames_sent = 0
        self._response: bytes | None = None

    def _frame(self, direction: str, data: bytes) -> bytes:
        self.frames_sent += 1
        return self.tap.frame(self.name, direction, data)

    def send_request(self, data: bytes) -> None:
        self._response = self._transfer(self.tap.message("request", bytes(data)))

    def receive_response(self) -> bytes:
        if self._response is None:
            raise ProtocolError("no response pending")
        data, self._response = self._response, None
        return self.tap.message("response", data)

    def exchange(self, data: bytes) -> bytes:
        self.send_request(data)
        return self.receive_response()

    def _transfer(self, data: bytes) -> bytes:
        raise NotImplementedError


class DirectBinding(Binding):
    """Unframed delivery straight to a dispatch function."""

    name = "direct"

    def __init__(self, dispatch: Callable[[bytes], bytes], tap: Tap | None = None):
        super().__init__(tap)
        self.dispatch = dispatch

    def _transfer(self, data: bytes) -> bytes:
        return self._frame("in", self.dispatch(self._frame("out", data)))


class TpmBinding(Binding):
    name = "tpm"

    def __init__(self, handle_command: Callable[[bytes], bytes], secured: bool = False,
                 tap: Tap | None = None):
        super().__init__(tap)
        self.handle_command = handle_command
        self.secured = secured

    def _transfer(self, data: bytes) -> bytes:
        reply = self._frame("in", self.handle_command(self._frame("out", tpm_encode(data, self.secured))))
        if len(reply) >= 2 and struct.unpack(">H", reply[:2])[0] == TPM_TAG_RSP_ERROR:
            raise TransportError(f"TPM returned error response {reply.hex()}")
        payload, _ = tpm_decode(reply)
        return payload


class DoePort(Protocol):
    def doe_write(self, chunk: bytes) -> None: ...

    def doe_go(self) -> None: ...

    def doe_read(self) -> bytes: ...


class DoeBinding(Binding):
    name = "doe"

    def __init__(self, port: DoePort, secured: bool = False, tap: Tap | None = None):
        super().__init__(tap)
        self.port = port
        self.secured = secured

    def _transfer(self, data: bytes) -> bytes:
        self.port.doe_write(self._frame("out", doe_encode(data, self.secured)))
        self.port.doe_go()
        reply = self._frame("in", self.port.doe_read())
        payload, _ = doe_decode(reply)
        return payload


def usb_spdm_request(endpoint: UsbControlEndpoint, spdm: bytes, *, chunk_limit: int = DEFAULT_CHUNK,
                     secured: bool = False, on_frame: Callable[[str, bytes], bytes] | None = None) -> int:
    """Send one message as host-to-device control transfers; returns the transfer count."""
    transfers = usb_chunks(spdm, chunk_limit, secured)
    for setup, data in transfers:
        if on_frame is not None:
            data = on_frame("out", setup.pack() + data)[8:]
        endpoint.control(setup, data)
    return len(transfers)


def usb_spdm_read_response(endpoint: UsbControlEndpoint, *, chunk_limit: int = DEFAULT_CHUNK,
                           on_frame: Callable[[str, bytes], bytes] | None = None) -> bytes:
    """Read the size prefix, then walk the response in ``chunk_limit`` pieces."""
    def read(setup: UsbSetupPacket) -> bytes:
        data = bytes(endpoint.control(setup))
        if on_frame is not None:
            data = on_frame("in", pack_device_to_host_header(total, setup) + data)[10:]
        if len(data) != setup.wLength:
            raise TransportError(f"short read: wanted {setup.wLength}, got {len(data)}")
        return data

    total = 0
    size_bytes = read(spdm_setup(True, 0, USB_SIZE_PREFIX))
    total = struct.unpack("<H", size_bytes)[0]
    if total == 0:
        raise ProtocolError("device reported an empty response")
    wrapped = b"".join(read(spdm_setup(True, index, length))
                       for index, length in usb_read_plan(total, chunk_limit))
    spdm, _ = mctp_unwrap(wrapped)
    return spdm


class UsbBinding(Binding):
    name = "usb"

    def __init__(self, endpoint: UsbControlEndpoint, chunk_limit: int = DEFAULT_CHUNK,
                 secured: bool = False, tap: Tap | None = None):
        super().__init__(tap)
        self.endpoint = endpoint
        self.chunk_limit = chunk_limit
        self.secured = secured

    def _transfer(self, data: bytes) -> bytes:
        usb_spdm_request(self.endpoint, data, chunk_limit=self.chunk_limit,
                         secured=self.secured, on_frame=self._frame)
        return usb_spdm_read_response(self.endpoint, chunk_limit=self.chunk_limit,
                                      on_frame=self._frame)


class UsbSpdmFunction:
    """Device-side SPDM handling for vendor request 0x32.

    Host-to-device transfers are reassembled by ``wIndex``; a transfer at
    ``wIndex`` 0 starts a new message. The first device-to-host transfer after a
    complete request dispatches it and serves the response buffer.
    """

    def __init__(self, dispatch: Callable[[bytes], bytes]):
        self.dispatch = dispatch
        self._incoming = bytearray()
        self._outgoing: bytes | None = None

    @property
    def pending_response(self) -> bool:
        return self._outgoing is not None or bool(self._incoming)

    def control(self, setup: UsbSetupPacket, data: bytes = b"") -> bytes:
        if setup.bmRequestType == BM_HOST_TO_DEVICE:
            if setup.wIndex == 0:
                self._incoming = bytearray()
                self._outgoing = None
            if setup.wIndex != len(self._incoming) or setup.wLength != len(data):
                raise Stall(f"out-of-sequence write at wIndex {setup.wIndex}")
            self._incoming += data
            return b""
        if setup.bmRequestType != BM_DEVICE_TO_HOST:
            raise Stall(f"bad bmRequestType 0x{setup.bmRequestType:02X}")
        if self._outgoing is None:
            if not self._incoming:
                raise Stall("no SPDM request pending")
            try:
                spdm, secured = mctp_unwrap(bytes(self._incoming))
            except FrameError as exc:
                raise Stall(str(exc)) from None
            self._incoming = bytearray()
            self._outgoing = usb_serve_buffer(self.dispatch(spdm), secured)
        end = setup.wIndex + setup.wLength
        if end > len(self._outgoing):
            raise Stall(f"read beyond response (wIndex {setup.wIndex}, wLength {setup.wLength})")
        return self._outgoing[setup.wIndex:end]
