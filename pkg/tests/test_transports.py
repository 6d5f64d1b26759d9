import struct

import pytest
from hypothesis import given, settings, strategies as st

from spdm_boot.transports import (
    BM_DEVICE_TO_HOST, DOE_HEADER_SIZE, DoeBinding, DoeHeader, DoeMailbox, FrameError, Overflow,
    ProtocolError, Stall, TpmBinding, TransportError, UsbBinding, UsbSetupPacket, UsbSpdmFunction,
    doe_decode, doe_encode, doe_mailbox_write, mctp_unwrap, mctp_wrap, pack_device_to_host_header,
    spdm_setup, tpm_decode, tpm_encode, tpm_error_response, unpack_device_to_host_header,
    usb_chunks, usb_read_plan, usb_reassemble, usb_serve_buffer, usb_spdm_read_response,
    usb_spdm_request,
)

payloads = st.binary(min_size=1, max_size=4096)
CHUNKS = (8, 64, 512)
PROPERTY = settings(max_examples=150, deadline=None)


# --- TPM ----------------------------------------------------------------------------

def test_tpm_frame_layout():
    assert tpm_encode(b"\xAA\xBB") == b"\x81\x01\x00\x00\x00\x08\xAA\xBB"
    assert tpm_encode(b"", secured=True) == b"\x82\x01\x00\x00\x00\x06"
    assert tpm_error_response() == b"\x80\x01\x00\x00\x00\x0a\x00\x00\x00\x1e"


@PROPERTY
@given(payloads, st.booleans())
def test_tpm_round_trip(payload, secured):
    assert tpm_decode(tpm_encode(payload, secured)) == (payload, secured)


@PROPERTY
@given(payloads, st.integers(-5, 5).filter(bool))
def test_tpm_length_mismatch_rejected(payload, delta):
    frame = tpm_encode(payload)
    bad = frame[:2] + struct.pack(">I", len(frame) + delta) + frame[6:]
    with pytest.raises(FrameError):
        tpm_decode(bad)
    with pytest.raises(FrameError):
        tpm_decode(frame[:-1])


def test_tpm_rejects_unknown_tag_and_short_frame():
    with pytest.raises(FrameError):
        tpm_decode(b"\x80\x01\x00\x00\x00\x06")
    with pytest.raises(FrameError):
        tpm_decode(b"\x81\x01")


# --- DOE ----------------------------------------------------------------------------

def test_doe_layout_and_empty_object():
    obj = doe_encode(b"\x01\x02\x03\x04\x05")
    header = DoeHeader.unpack(obj)
    assert (header.vendor_id, header.data_object_type) == (0x0001, 0x01)
    assert header.length_dwords == 5 and len(obj) == 20
    assert obj[8:12] == b"\x05\x00\x00\x00" and obj[17:] == b"\x00\x00\x00"
    assert DoeHeader.unpack(doe_encode(b"", secured=True)).data_object_type == 0x02
    assert doe_decode(DoeHeader(1, 1, 2).pack()) == (b"", False)


@PROPERTY
@given(payloads, st.booleans())
def test_doe_round_trip(payload, secured):
    obj = doe_encode(payload, secured)
    assert len(obj) % 4 == 0
    assert doe_decode(obj) == (payload, secured)


@PROPERTY
@given(payloads, st.integers(1, 3))
def test_doe_length_mismatch_rejected(payload, extra_dwords):
    obj = doe_encode(payload)
    header = DoeHeader.unpack(obj)
    longer = DoeHeader(header.vendor_id, header.data_object_type, header.length_dwords + extra_dwords)
    with pytest.raises(FrameError):
        doe_decode(longer.pack() + obj[DOE_HEADER_SIZE:])
    with pytest.raises(FrameError):
        doe_decode(obj + bytes(4))
    lying = obj[:8] + struct.pack("<I", len(payload) + 4) + obj[12:]
    with pytest.raises(FrameError):
        doe_decode(lying)


def test_doe_rejects_other_object_types():
    with pytest.raises(FrameError):
        doe_decode(DoeHeader(1, 0, 3).pack() + bytes(4))
    with pytest.raises(FrameError):
        DoeHeader(1, 1, 1).pack()


@PROPERTY
@given(st.lists(st.binary(min_size=1, max_size=200), min_size=1, max_size=6), st.integers(0, 511))
def test_mailbox_wraps_and_preserves_objects(messages, start):
    box = DoeMailbox(capacity=512, start=start)
    for payload in messages:
        obj = doe_encode(payload)
        if len(obj) > box.capacity:
            continue
        doe_mailbox_write(box, obj)
        assert box.object_ready()
        assert doe_decode(box.take_object())[0] == payload
        assert box.pending == 0


def test_mailbox_partial_writes_and_overflow():
    box = DoeMailbox(capacity=64, start=60)
    obj = doe_encode(b"hello world")
    box.write(obj[:6])
    assert box.current_header() is None and not box.object_ready()
    box.write(obj[6:])
    assert box.object_ready() and box.take_object() == obj
    with pytest.raises(Overflow):
        box.write(bytes(65))
    with pytest.raises(ProtocolError):
        box.take_object()


# --- USB ----------------------------------------------------------------------------

def test_setup_packet_and_header_layout():
    setup = spdm_setup(True, 2, 64)
    assert setup.pack() == b"\x80\x32\x00\x00\x02\x00\x40\x00"
    header = pack_device_to_host_header(301, setup)
    assert len(header) == 10 and header[:2] == b"\x2d\x01"
    assert unpack_device_to_host_header(header) == (301, setup)
    assert mctp_wrap(b"x") == b"\x05x" and mctp_wrap(b"x", True) == b"\x06x"


@PROPERTY
@given(payloads, st.sampled_from(CHUNKS), st.booleans())
def test_usb_round_trip(payload, chunk, secured):
    transfers = usb_chunks(payload, chunk, secured)
    assert all(len(data) <= chunk for _, data in transfers)
    assert len(transfers) == -(-(len(payload) + 1) // chunk)
    assert usb_reassemble(transfers) == (payload, secured)

    buffer = usb_serve_buffer(payload, secured)
    total = struct.unpack("<H", buffer[:2])[0]
    assert total == len(payload) + 1
    wrapped = b"".join(buffer[i:i + n] for i, n in usb_read_plan(total, chunk))
    assert mctp_unwrap(wrapped) == (payload, secured)


@PROPERTY
@given(payloads, st.sampled_from(CHUNKS), st.integers(-3, 3).filter(bool))
def test_usb_length_mismatch_rejected(payload, chunk, delta):
    transfers = usb_chunks(payload, chunk)
    setup, data = transfers[-1]
    bad = UsbSetupPacket(setup.bmRequestType, setup.bRequest, setup.wValue, setup.wIndex,
                         max(setup.wLength + delta, 0))
    with pytest.raises(FrameError):
        usb_reassemble(transfers[:-1] + [(bad, data)])
    if len(transfers) > 1:
        with pytest.raises(FrameError):
            usb_reassemble(transfers[1:])


def test_mctp_rejects_unknown_type():
    with pytest.raises(FrameError):
        mctp_unwrap(b"\x07abc")
    with pytest.raises(FrameError):
        mctp_unwrap(b"")


class Echo:
    def __init__(self):
        self.function = UsbSpdmFunction(lambda req: req[::-1] * 2)
        self.reads = 0
        self.writes = 0

    def control(self, setup, data=b""):
        if setup.bmRequestType == BM_DEVICE_TO_HOST:
            self.reads += 1
        else:
            self.writes += 1
        return self.function.control(setup, data)


def test_usb_300_byte_response_uses_size_read_then_five_chunks():
    endpoint = Echo()
    request = bytes(range(150))
    assert usb_spdm_request(endpoint, request) == 3
    assert usb_spdm_read_response(endpoint) == request[::-1] * 2
    assert endpoint.reads == 1 + 5


@pytest.mark.parametrize("chunk", CHUNKS)
def test_usb_binding_round_trip(chunk):
    endpoint = Echo()
    binding = UsbBinding(endpoint, chunk_limit=chunk)
    assert binding.exchange(b"spdm") == b"mdpsmdps"
    # one write, the size read, then the 9-byte wrapped response in chunks
    assert binding.frames_sent == 1 + 1 + -(-9 // chunk)


def test_usb_function_stalls_on_bad_sequences():
    function = UsbSpdmFunction(lambda req: req)
    with pytest.raises(Stall):
        function.control(spdm_setup(True, 0, 2))
    with pytest.raises(Stall):
        function.control(spdm_setup(False, 5, 1), b"x")
    function.control(spdm_setup(False, 0, 2), b"\x05a")
    function.control(spdm_setup(True, 0, 2))
    with pytest.raises(Stall):
        function.control(spdm_setup(True, 2, 10))
    with pytest.raises(Stall):
        function.control(UsbSetupPacket(0x40, 0x32, 0, 0, 0))


class FlakyTpm:
    def __call__(self, frame):
        return tpm_error_response()


def test_tpm_binding_surfaces_error_response():
    with pytest.raises(TransportError):
        TpmBinding(FlakyTpm()).exchange(b"x")


def test_doe_binding_round_trip():
    class Port:
        def __init__(self):
            self.box = DoeMailbox()

        def doe_write(self, chunk):
            self.box.write(chunk)

        def doe_go(self):
            payload, secured = doe_decode(self.box.take_object())
            self.reply = doe_encode(payload.upper(), secured)

        def doe_read(self):
            return self.reply

    binding = DoeBinding(Port())
    assert binding.exchange(b"abc") == b"ABC"
    assert binding.frames_sent == 2
    with pytest.raises(ProtocolError):
        binding.receive_response()
