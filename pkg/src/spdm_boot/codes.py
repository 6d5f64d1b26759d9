"""Status codes shared by the protocol core and the boot flow.

``AUTHENTICATION_FAILURE`` (0x80000030) is the code the firmware reports when a
device fails authentication. Everything else is allocated from 0x80000001 up.
"""
import enum


class StatusCode(enum.IntEnum):
    SUCCESS = 0x00000000
    INVALID_REQUEST = 0x80000001
    UNEXPECTED_REQUEST = 0x80000002
    VERSION_MISMATCH = 0x80000003
    NO_COMMON_ALGORITHM = 0x80000004
    UNSUPPORTED_REQUEST = 0x80000005
    HANDSHAKE_FAILURE = 0x80000006
    TRANSPORT_FAILURE = 0x80000007
    ORDERING_VIOLATION = 0x80000008
    FIRMWARE_MODIFIED = 0x80000010
    FIRMWARE_SIGNATURE_INVALID = 0x80000011
    NO_BOOT_DEVICE = 0x80000012
    HOTPLUG_AFTER_SMM_LOCK = 0x80000013
    AUTHENTICATION_FAILURE = 0x80000030


def format_code(code: int) -> str:
    return f"0x{int(code):08X}"
