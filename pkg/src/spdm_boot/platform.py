"""Simulated hardware: TPM, PCIe (DOE) and USB devices, and the responder registry."""
from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import yaml

from .crypto import HashAlgorithm, hash_bytes
from .efi_store import FlashImage
from .spdm.responder import Responder
from .transports import (DOE_TYPE_SECURED_SPDM, DOE_TYPE_SPDM, DOE_VENDOR_ID, BM_DEVICE_TO_HOST,
                         DoeMailbox, FrameError, ProtocolError, Stall, TransportError,
                         UsbSetupPacket, UsbSpdmFunction, doe_decode, doe_encode, tpm_decode,
                         tpm_encode, tpm_error_response, TPM_RC_BAD_TAG)

PCR_COUNT = 24
HCRTM_PCR = 0
HCRTM_PREFIX = b"\x04"
# DXE SPDM results: certificates and challenge transcript, then measurements.
PCR_DEVICE_AUTH = 2
PCR_DEVICE_MEASUREMENT = 3


class TpmError(Exception):
    pass


@dataclass(frozen=True)
class NvLogEntry:
    index: int | str
    digest: bytes
    description: str


class VirtualTpm:
    def __init__(self, responder: Responder | None = None,
                 algorithms: Iterable[HashAlgorithm] = (HashAlgorithm.SHA256,)):
        self.pcr_banks = {alg: [bytes(alg.digest_size)] * PCR_COUNT for alg in algorithms}
        self.nv_indices: dict[str, bytes] = {}
        self._nv_log: list[NvLogEntry] = []
        self.responder = responder
        self.hcrtm_done = False
        self.extend_count = 0

    @property
    def nv_log(self) -> tuple[NvLogEntry, ...]:
        return tuple(self._nv_log)

    def _bank(self, algorithm: HashAlgorithm) -> list[bytes]:
        try:
            return self.pcr_banks[algorithm]
        except KeyError:
            raise TpmError(f"no PCR bank for {algorithm.name}") from None

    def read(self, index: int, algorithm: HashAlgorithm = HashAlgorithm.SHA256) -> bytes:
        if not 0 <= index < PCR_COUNT:
            raise TpmError(f"invalid PCR index {index}")
        return self._bank(algorithm)[index]

    def extend(self, index: int, data: bytes, algorithm: HashAlgorithm = HashAlgorithm.SHA256,
               description: str = "") -> bytes:
        """PCR[index] = H(PCR[index] || H(data))."""
        if not isinstance(index, int) or not 0 <= index < PCR_COUNT:
            raise TpmError(f"invalid PCR index {index}")
        bank = self._bank(algorithm)
        current = bank[index]
        measured = hash_bytes(data, algorithm)
        bank[index] = hash_bytes(current + measured, algorithm)
        self.extend_count += 1
        self._nv_log.append(NvLogEntry(index, bank[index], description))
        return bank[index]

    def hcrtm_extend(self, data: bytes, algorithm: HashAlgorithm = HashAlgorithm.SHA256) -> bytes:
        """PCR[0] = H(0x04 || H(data)); allowed once per power-on."""
        if self.hcrtm_done:
            raise TpmError("H-CRTM already measured for this power cycle")
        bank = self._bank(algorithm)
        bank[HCRTM_PCR] = hash_bytes(HCRTM_PREFIX + hash_bytes(data, algorithm), algorithm)
        self.hcrtm_done = True
        self.extend_count += 1
        self._nv_log.append(NvLogEntry(HCRTM_PCR, bank[HCRTM_PCR], "H-CRTM"))
        return bank[HCRTM_PCR]

    def extend_nv(self, name: str, data: bytes, description: str = "",
                  algorithm: HashAlgorithm = HashAlgorithm.SHA256) -> bytes:
        """Extend a named NV index with the same fold as a PCR."""
        current = self.nv_indices.get(name, bytes(algorithm.digest_size))
        self.nv_indices[name] = hash_bytes(current + hash_bytes(data, algorithm), algorithm)
        self._nv_log.append(NvLogEntry(name, self.nv_indices[name], description))
        return self.nv_indices[name]

    def handle_command(self, frame: bytes) -> bytes:
        try:
            payload, secured = tpm_decode(frame)
        except FrameError:
            return tpm_error_response(TPM_RC_BAD_TAG)
        if self.responder is None:
            return tpm_error_response(TPM_RC_BAD_TAG)
        return tpm_encode(self.responder.dispatch(payload), secured)


def tpm_extend_pcr(tpm: VirtualTpm, index: int, algorithm: HashAlgorithm, data: bytes) -> VirtualTpm:
    tpm.extend(index, data, algorithm)
    return tpm


def tpm_hcrtm_extend(tpm: VirtualTpm, algorithm: HashAlgorithm, data: bytes) -> VirtualTpm:
    tpm.hcrtm_extend(data, algorithm)
    return tpm


def tpm_handle_command(tpm: VirtualTpm, frame: bytes) -> bytes:
    return tpm.handle_command(frame)


# --- devices -----------------------------------------------------------------------

class Bus(str, enum.Enum):
    PCIE = "PCIe"
    USB = "USB"


PCIE_CLASSES = ("nvme-storage", "nic", "gpu", "serial", "rng")
USB_CLASSES = ("storage", "keyboard", "mouse")

# I/O functions a device class exposes once fully initialized.
_IO_FUNCTIONS = {
    "nvme-storage": ("admin-queue", "io-queue"),
    "nic": ("rx", "tx"),
    "gpu": ("framebuffer",),
    "serial": ("uart",),
    "rng": ("entropy",),
    "storage": ("control", "bulk"),
    "keyboard": ("control", "interrupt"),
    "mouse": ("control", "interrupt"),
}

USB_GET_DESCRIPTOR = 0x06
USB_DESCRIPTOR_DEVICE = 0x01


class DeviceBlocked(TransportError):
    pass


@dataclass(frozen=True)
class DeviceSpec:
    device_id: str
    bus: Bus
    device_class: str
    bootable: bool = False
    identity: str = "shared"
    firmware_path: str | None = None

    def __post_init__(self):
        allowed = PCIE_CLASSES if self.bus is Bus.PCIE else USB_CLASSES
        if self.device_class not in allowed:
            raise ValueError(f"{self.device_id}: class {self.device_class!r} not valid on {self.bus.value}")
        if self.identity not in ("shared", "own"):
            raise ValueError(f"{self.device_id}: identity must be 'shared' or 'own'")

    def firmware_blob(self) -> bytes:
        if self.firmware_path:
            return Path(self.firmware_path).read_bytes()
        return default_firmware_blob(self.device_id, self.device_class)

    @property
    def is_boot_candidate(self) -> bool:
        if self.bus is Bus.PCIE:
            return self.device_class == "nvme-storage"
        return self.device_class == "storage" and self.bootable


def default_firmware_blob(device_id: str, device_class: str, size: int = 4096) -> bytes:
    seed = hashlib.sha256(f"{device_class}/{device_id}".encode()).digest()
    return (seed * (size // len(seed) + 1))[:size]


@dataclass(frozen=True)
class Topology:
    devices: tuple[DeviceSpec, ...]
    hotplug: tuple[DeviceSpec, ...] = ()

    def __post_init__(self):
        ids = [d.device_id for d in self.devices + self.hotplug]
        if len(ids) != len(set(ids)):
            raise ValueError("device ids must be unique")
        if "tpm" in ids:
            raise ValueError("'tpm' is reserved")

    def on(self, bus: Bus) -> tuple[DeviceSpec, ...]:
        return tuple(d for d in self.devices if d.bus is bus)


def default_topology() -> Topology:
    pcie = [DeviceSpec(name, Bus.PCIE, cls) for name, cls in
            (("nvme0", "nvme-storage"), ("nic0", "nic"), ("gpu0", "gpu"),
             ("serial0", "serial"), ("rng0", "rng"))]
    usb = [DeviceSpec("usb-storage0", Bus.USB, "storage", bootable=True),
           DeviceSpec("usb-kbd0", Bus.USB, "keyboard"),
           DeviceSpec("usb-mouse0", Bus.USB, "mouse")]
    return Topology(tuple(pcie + usb))


def _spec_from_record(rec: dict, base: Path | None) -> DeviceSpec:
    known = {"id", "bus", "class", "bootable", "identity", "firmware"}
    if not isinstance(rec, dict) or not {"id", "bus", "class"} <= set(rec) or set(rec) - known:
        raise ValueError(f"bad device record {rec!r}; fields: {sorted(known)}")
    bus = {"pcie": Bus.PCIE, "usb": Bus.USB}.get(str(rec["bus"]).lower())
    if bus is None:
        raise ValueError(f"unknown bus {rec['bus']!r}")
    firmware = rec.get("firmware")
    if firmware and base is not None and not Path(firmware).is_absolute():
        firmware = str(base / firmware)
    return DeviceSpec(str(rec["id"]), bus, str(rec["class"]), bool(rec.get("bootable", False)),
                      str(rec.get("identity", "shared")), firmware)


def parse_topology(doc: str, base: Path | None = None) -> Topology:
    """Topology text: ``devices`` and optional ``hotplug`` lists of device records."""
    data = yaml.safe_load(doc) or {}
    if not isinstance(data, dict) or set(data) - {"devices", "hotplug"}:
        raise ValueError("topology must be a mapping with 'devices' and optional 'hotplug'")
    return Topology(tuple(_spec_from_record(r, base) for r in data.get("devices") or ()),
                    tuple(_spec_from_record(r, base) for r in data.get("hotplug") or ()))


def load_topology(path: str | Path) -> Topology:
    path = Path(path)
    return parse_topology(path.read_text(), path.parent)


def dump_topology(topology: Topology) -> str:
    def rec(d: DeviceSpec) -> dict:
        out = {"id": d.device_id, "bus": d.bus.value.lower(), "class": d.device_class}
        if d.bootable:
            out["bootable"] = True
        if d.identity != "shared":
            out["identity"] = d.identity
        if d.firmware_path:
            out["firmware"] = d.firmware_path
        return out
    doc = {"devices": [rec(d) for d in topology.devices]}
    if topology.hotplug:
        doc["hotplug"] = [rec(d) for d in topology.hotplug]
    return yaml.safe_dump(doc, sort_keys=False)


class VirtualDevice:
    def __init__(self, spec: DeviceSpec, responder: Responder, *, mailbox_capacity: int = 4096):
        self.spec = spec
        self.device_id = spec.device_id
        self.bus = spec.bus
        self.device_class = spec.device_class
        self.responder = responder
        self.firmware_blob = spec.firmware_blob()
        self.initialized = False
        self.quarantined = False
        self.io_functions: set[str] = set()
        self.allocated: bytearray | None = None
        self.mailbox = DoeMailbox(mailbox_capacity) if spec.bus is Bus.PCIE else None
        self.usb_function = UsbSpdmFunction(self._dispatch) if spec.bus is Bus.USB else None

    def _dispatch(self, request: bytes) -> bytes:
        return self.responder.dispatch(request)

    @property
    def bootable(self) -> bool:
        return self.spec.is_boot_candidate

    def attach(self) -> None:
        """Power on: USB devices get their control pipe only; memory is reserved."""
        self.allocated = bytearray(256)
        if self.bus is Bus.USB:
            self.io_functions = {"control"}

    def initialize(self) -> None:
        if self.quarantined:
            raise DeviceBlocked(f"{self.device_id} is quarantined")
        self.initialized = True
        self.io_functions = set(_IO_FUNCTIONS[self.device_class])

    def quarantine(self) -> None:
        self.quarantined = True
        self.initialized = False
        self.io_functions = set()
        self.allocated = None

    def io(self, function: str) -> str:
        """Non-SPDM I/O: refused unless the device is initialized for that function."""
        if self.quarantined or function not in self.io_functions:
            raise DeviceBlocked(f"{self.device_id}: {function} I/O not allowed")
        return f"{self.device_id}:{function}:ok"

    # DOE port used by the host-side binding.
    def doe_write(self, chunk: bytes) -> None:
        self.mailbox.write(chunk)

    def doe_go(self) -> None:
        pcie_doe_callback(self, self.mailbox)

    def doe_read(self) -> bytes:
        if not self.mailbox.read_buffer:
            raise ProtocolError(f"{self.device_id}: DOE read mailbox empty ({self.mailbox.status})")
        data, self.mailbox.read_buffer = self.mailbox.read_buffer, b""
        return data

    # USB control endpoint used by the host-side binding.
    def control(self, setup: UsbSetupPacket, data: bytes = b"") -> bytes:
        return usb_control_handler(self, setup, data)


def pcie_doe_callback(device: VirtualDevice, mailbox: DoeMailbox) -> DoeMailbox:
    """Drain complete objects; SPDM objects are dispatched, others acknowledged and dropped."""
    while mailbox.object_ready():
        header = mailbox.current_header()
        obj = mailbox.take_object()
        if header.vendor_id != DOE_VENDOR_ID or header.data_object_type not in (
                DOE_TYPE_SPDM, DOE_TYPE_SECURED_SPDM):
            mailbox.status = "ignored"
            continue
        try:
            payload, secured = doe_decode(obj)
        except FrameError:
            mailbox.status = "error"
            mailbox.read_buffer = b""
            continue
        mailbox.read_buffer = doe_encode(device.responder.dispatch(payload), secured)
        mailbox.status = "ok"
    return mailbox


def device_descriptor(device: VirtualDevice) -> bytes:
    """Standard 18-byte device descriptor."""
    product = int.from_bytes(hashlib.sha256(device.device_id.encode()).digest()[:2], "little")
    class_code = {"storage": 0x08, "keyboard": 0x03, "mouse": 0x03}[device.device_class]
    return struct.pack("<BBHBBBBHHHBBBB", 18, USB_DESCRIPTOR_DEVICE, 0x0200, class_code, 0, 0, 64,
                       0x1D6B, product, 0x0100, 1, 2, 0, 1)


def usb_control_handler(device: VirtualDevice, setup: UsbSetupPacket, data: bytes = b"") -> bytes:
    if device.quarantined:
        raise Stall(f"{device.device_id} is quarantined")
    if setup.is_spdm:
        return device.usb_function.control(setup, data)
    if (setup.bmRequestType == BM_DEVICE_TO_HOST and setup.bRequest == USB_GET_DESCRIPTOR
            and setup.wValue >> 8 == USB_DESCRIPTOR_DEVICE):
        return device_descriptor(device)[:setup.wLength]
    raise Stall(f"{device.device_id}: unsupported control request 0x{setup.bRequest:02X}")


# --- registry ----------------------------------------------------------------------

class ResponderRegistry:
    """Ordered responder entries; the TPM responder is held directly."""

    TPM_KEY = ("tpm", "tpm")

    def __init__(self):
        self._entries: list[tuple[tuple[str, str], Responder]] = []
        self.tpm: Responder | None = None

    def register(self, key: tuple[str, str], responder: Responder) -> None:
        if key == self.TPM_KEY:
            self.tpm = responder
            return
        if self.lookup(key) is not None:
            raise KeyError(f"responder already registered for {key}")
        self._entries.append((key, responder))

    def lookup(self, key: tuple[str, str]) -> Responder | None:
        if key == self.TPM_KEY:
            return self.tpm
        for entry_key, responder in self._entries:
            if entry_key == key:
                return responder
        return None

    def __len__(self) -> int:
        return len(self._entries) + (self.tpm is not None)


def registry_key(device: VirtualDevice | DeviceSpec) -> tuple[str, str]:
    return ("doe" if device.bus is Bus.PCIE else "usb", device.device_id)


def registry_lookup(registry: ResponderRegistry, key: tuple[str, str]) -> Responder | None:
    return registry.lookup(key)


@dataclass
class Platform:
    flash: FlashImage
    tpm: VirtualTpm
    devices: list[VirtualDevice]
    registry: ResponderRegistry
    hotplug: list[VirtualDevice] = field(default_factory=list)

    def device(self, device_id: str) -> VirtualDevice:
        for dev in self.devices + self.hotplug:
            if dev.device_id == device_id:
                return dev
        raise KeyError(device_id)

    def on(self, bus: Bus) -> list[VirtualDevice]:
        return [d for d in self.devices if d.bus is bus]
