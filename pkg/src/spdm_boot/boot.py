"""End-to-end boot: pre-boot verification, PEI, DXE (PCIe then USB), SMM lock, boot select."""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field

from .codes import StatusCode, format_code
from .crypto import (ChainError, CryptoCounter, HashAlgorithm, RandomSource, count_crypto_ops,
                     hash_bytes, parse_spdm_cert_chain_blob, verify)
from .efi_store import (EXPECTED_HCRTM, HCRTM_SIGNATURE, PK, REQUESTER_CERT_CHAIN,
                        REQUESTER_PRIVATE_KEY, RESPONDER_CERT_CHAIN_PREFIX, get_data,
                        responder_chain_name)
from .platform import (PCR_COUNT, PCR_DEVICE_AUTH, PCR_DEVICE_MEASUREMENT, USB_DESCRIPTOR_DEVICE,
                       USB_GET_DESCRIPTOR, Bus, Platform, VirtualDevice)
from .spdm import Requester, RequesterIdentity, SpdmError
from .transports import (BM_DEVICE_TO_HOST, DEFAULT_CHUNK, DoeBinding, FrameRecord, Tap,
                         TpmBinding, TransportError, UsbBinding, UsbSetupPacket)

MSG_FIRMWARE_MODIFIED = "SECURITY ERROR - FIRMWARE MODIFIED"
MSG_SIGNATURE_INVALID = "Error verifying firmware hash - Public Key signature verification has failed"
TPM_SUBJECT = "tpm"
FIRMWARE_SUBJECT = "firmware"


def auth_failure_detail(code: int) -> str:
    return f"Authentication - {format_code(code)}"


class Phase(str, enum.Enum):
    PRE_BOOT = "PreBoot"
    PEI = "PEI"
    DXE_PCIE = "DXE-PCIe"
    DXE_USB = "DXE-USB"
    SMM_LOCK = "SmmLock"
    BOOT_SELECT = "BootSelect"


PHASE_ORDER = list(Phase)


class EventKind(str, enum.Enum):
    INTEGRITY_CHECK = "IntegrityCheck"
    AUTHENTICITY_CHECK = "AuthenticityCheck"
    SPDM_AUTH = "SpdmAuth"
    SPDM_MEASURE = "SpdmMeasure"
    PCR_EXTEND = "PcrExtend"
    QUARANTINE = "Quarantine"
    HALT = "Halt"
    HANDOFF = "Handoff"
    SMM_LOCK = "SmmLock"


class BootResult(str, enum.Enum):
    BOOTED = "Booted"
    HALTED_INTEGRITY = "HaltedIntegrity"
    HALTED_AUTHENTICITY = "HaltedAuthenticity"
    NO_BOOT_DEVICE = "NoBootDevice"


EXIT_STATUS = {
    BootResult.BOOTED: 0,
    BootResult.HALTED_INTEGRITY: 2,
    BootResult.HALTED_AUTHENTICITY: 3,
    BootResult.NO_BOOT_DEVICE: 4,
}


class ConfigurationError(Exception):
    """Boot inputs are incomplete; raised before any event is recorded."""


@dataclass(frozen=True)
class Outcome:
    code: int | None = None

    @property
    def passed(self) -> bool:
        return self.code is None

    def __str__(self) -> str:
        return "Pass" if self.passed else f"Fail({format_code(self.code)})"


PASS = Outcome()


@dataclass(frozen=True)
class BootEvent:
    sequence_no: int
    phase: Phase
    kind: EventKind
    subject: str
    outcome: Outcome
    detail: str

    def as_dict(self) -> dict:
        return {"seq": self.sequence_no, "phase": self.phase.value, "kind": self.kind.value,
                "subject": self.subject, "outcome": str(self.outcome), "detail": self.detail}


@dataclass
class MetricsSample:
    spdm_messages_sent: int = 0
    transport_frames: int = 0
    hash_ops: int = 0
    sign_ops: int = 0
    verify_ops: int = 0
    pcr_extends: int = 0
    enumeration_steps: int = 0

    @property
    def crypto_ops(self) -> int:
        return self.hash_ops + self.sign_ops + self.verify_ops

    @property
    def simulated_steps(self) -> int:
        return (self.spdm_messages_sent + self.transport_frames + self.crypto_ops
                + self.pcr_extends + self.enumeration_steps)

    def as_dict(self) -> dict:
        out = asdict(self)
        out["crypto_ops"] = self.crypto_ops
        out["simulated_steps"] = self.simulated_steps
        return out


@dataclass
class BootReport:
    events: list[BootEvent]
    result: BootResult
    metrics: MetricsSample
    diagnostics: list[str] = field(default_factory=list)
    pcrs: dict[int, str] = field(default_factory=dict)
    frames: list[FrameRecord] = field(default_factory=list)

    @property
    def exit_status(self) -> int:
        return EXIT_STATUS[self.result]

    def events_for(self, subject: str) -> list[BootEvent]:
        return [e for e in self.events if e.subject == subject]

    def failures(self) -> list[BootEvent]:
        return [e for e in self.events if not e.outcome.passed]

    def serialize(self) -> str:
        """One JSON record per event and per frame, then a summary record."""
        lines = [json.dumps({"record": "event", **e.as_dict()}, sort_keys=True) for e in self.events]
        lines += [json.dumps({"record": "frame", **f.as_dict()}, sort_keys=True) for f in self.frames]
        summary = {"record": "summary", "result": self.result.value, "exit_status": self.exit_status,
                   "metrics": self.metrics.as_dict(), "diagnostics": self.diagnostics,
                   "pcrs": {str(k): v for k, v in sorted(self.pcrs.items())}}
        lines.append(json.dumps(summary, sort_keys=True))
        return "\n".join(lines) + "\n"

    def summary_text(self) -> str:
        m = self.metrics
        rows = [f"result: {self.result.value} (exit {self.exit_status})",
                f"events: {len(self.events)}  failures: {len(self.failures())}",
                f"spdm messages: {m.spdm_messages_sent}  frames: {m.transport_frames}  "
                f"crypto ops: {m.crypto_ops}  pcr extends: {m.pcr_extends}  "
                f"simulated steps: {m.simulated_steps}"]
        return "\n".join(rows)


@dataclass(frozen=True)
class BootConfig:
    seed: int = 0
    spdm_enabled: bool = True
    usb_chunk_limit: int = DEFAULT_CHUNK
    hotplug: bool = True


@dataclass
class FirmwareContext:
    """What the firmware knows after reading its variables."""

    identity: RequesterIdentity
    device_anchor: bytes
    tpm_anchor: bytes
    digest_cache: dict[bytes, bytes]

    @classmethod
    def from_store(cls, store) -> "FirmwareContext":
        chain_blob = get_data(store, REQUESTER_CERT_CHAIN)
        key = get_data(store, REQUESTER_PRIVATE_KEY)
        if chain_blob is None or key is None:
            raise ConfigurationError("requester identity variables are missing")
        cache = {}
        for (guid, name), var in store.variables.items():
            if name.startswith(RESPONDER_CERT_CHAIN_PREFIX):
                cache[hash_bytes(var.data)] = var.data
        tpm_blob = get_data(store, responder_chain_name(TPM_SUBJECT))
        if tpm_blob is None:
            raise ConfigurationError("TPM responder chain variable is missing")
        return cls(RequesterIdentity(chain_blob, key), _root_digest(chain_blob),
                   _root_digest(tpm_blob), cache)


# An anchor no chain can match: used when the provisioned chain itself is unreadable.
NO_ANCHOR = b""


def _root_digest(blob: bytes) -> bytes:
    """Digest of the first (root) certificate actually present in a chain blob."""
    try:
        return hash_bytes(parse_spdm_cert_chain_blob(blob).certificates[0])
    except ChainError:
        return NO_ANCHOR


class BootOrchestrator:
    def __init__(self, platform: Platform, config: BootConfig = BootConfig()):
        self.platform = platform
        self.config = config
        self.rng = RandomSource(config.seed).fork("firmware")
        self.events: list[BootEvent] = []
        self.diagnostics: list[str] = []
        self.tap = Tap()
        self.enumeration_steps = 0
        self.firmware: FirmwareContext | None = None

    # -- event log ----------------------------------------------------------------

    def _emit(self, phase: Phase, kind: EventKind, subject: str, outcome: Outcome = PASS,
              detail: str = "") -> BootEvent:
        event = BootEvent(len(self.events) + 1, phase, kind, subject, outcome, detail)
        self.events.append(event)
        return event

    # -- phases -------------------------------------------------------------------

    def preboot_verify(self) -> BootResult | None:
        """H-CRTM, then integrity, then authenticity. Returns a halt result or None."""
        flash, tpm = self.platform.flash, self.platform.tpm
        store = flash.variables_section
        expected = get_data(store, EXPECTED_HCRTM)
        signature = get_data(store, HCRTM_SIGNATURE)
        pk_blob = get_data(store, PK)
        if expected is None or signature is None or pk_blob is None:
            raise ConfigurationError("ExpectedHcrtm, HcrtmSignature and PK must be provisioned")

        tpm.hcrtm_extend(flash.code_section)
        if hash_bytes(flash.code_section) != expected:
            self.diagnostics.append(MSG_FIRMWARE_MODIFIED)
            self._emit(Phase.PRE_BOOT, EventKind.INTEGRITY_CHECK, FIRMWARE_SUBJECT,
                       Outcome(StatusCode.FIRMWARE_MODIFIED), MSG_FIRMWARE_MODIFIED)
            return BootResult.HALTED_INTEGRITY
        self._emit(Phase.PRE_BOOT, EventKind.INTEGRITY_CHECK, FIRMWARE_SUBJECT, PASS,
                   "H-CRTM matches ExpectedHcrtm")

        try:
            pk_key = parse_spdm_cert_chain_blob(pk_blob).leaf.public_key
        except ChainError:
            pk_key = None
        if pk_key is None or not verify(expected, signature, pk_key):
            self.diagnostics.append(MSG_SIGNATURE_INVALID)
            self._emit(Phase.PRE_BOOT, EventKind.AUTHENTICITY_CHECK, FIRMWARE_SUBJECT,
                       Outcome(StatusCode.FIRMWARE_SIGNATURE_INVALID), MSG_SIGNATURE_INVALID)
            return BootResult.HALTED_AUTHENTICITY
        self._emit(Phase.PRE_BOOT, EventKind.AUTHENTICITY_CHECK, FIRMWARE_SUBJECT, PASS,
                   "HcrtmSignature verified with PK")
        return None

    def run_pei(self) -> None:
        """Mutual authentication with the TPM; failures are logged, never fatal."""
        if not self.config.spdm_enabled:
            return
        tpm = self.platform.tpm
        requester = Requester(TpmBinding(tpm.handle_command, tap=self.tap), rng=self.rng.fork(TPM_SUBJECT),
                              identity=self.firmware.identity, digest_cache=self.firmware.digest_cache)
        try:
            requester.init_connection()
            requester.authenticate(self.firmware.tpm_anchor)
            requester.mutual_auth_encapsulated()
        except (SpdmError, TransportError) as exc:
            code = getattr(exc, "code", StatusCode.TRANSPORT_FAILURE)
            detail = auth_failure_detail(code)
            self.diagnostics.append(f"{TPM_SUBJECT}: {detail}")
            self._emit(Phase.PEI, EventKind.SPDM_AUTH, TPM_SUBJECT, Outcome(code), detail)
            return
        self._emit(Phase.PEI, EventKind.SPDM_AUTH, TPM_SUBJECT, PASS, "mutual authentication complete")

    def _binding(self, device: VirtualDevice):
        if device.bus is Bus.PCIE:
            return DoeBinding(device, tap=self.tap)
        return UsbBinding(device, chunk_limit=self.config.usb_chunk_limit, tap=self.tap)

    def _attest(self, phase: Phase, device: VirtualDevice) -> None:
        """Full SPDM flow for one device; success initializes it, failure quarantines it."""
        requester = Requester(self._binding(device), rng=self.rng.fork(device.device_id),
                              identity=self.firmware.identity, digest_cache=self.firmware.digest_cache)
        kind = EventKind.SPDM_AUTH
        try:
            requester.init_connection()
            requester.authenticate(self.firmware.device_anchor)
            kind = EventKind.SPDM_MEASURE
            blocks = requester.get_measurements()
            kind = EventKind.SPDM_AUTH
            session = requester.establish_session(mutual=True)
        except (SpdmError, TransportError) as exc:
            code = getattr(exc, "code", StatusCode.TRANSPORT_FAILURE)
            detail = auth_failure_detail(code)
            self.diagnostics.append(f"{device.device_id}: {detail}")
            self._emit(phase, kind, device.device_id, Outcome(code), detail)
            device.quarantine()
            self._emit(phase, EventKind.QUARANTINE, device.device_id, Outcome(code), detail)
            return

        ctx = requester.ctx
        self._emit(phase, EventKind.SPDM_AUTH, device.device_id, PASS,
                   f"authenticated; session 0x{session.session_id:08X}")
        self._emit(phase, EventKind.SPDM_MEASURE, device.device_id, PASS,
                   f"{len(blocks)} measurement block(s)")
        tpm = self.platform.tpm
        tpm.extend(PCR_DEVICE_AUTH, hash_bytes(ctx.peer_cert_blob) + ctx.challenge_transcript_hash,
                   description=f"{device.device_id} certificate+challenge")
        self._emit(phase, EventKind.PCR_EXTEND, device.device_id, PASS, f"PCR[{PCR_DEVICE_AUTH}]")
        tpm.extend(PCR_DEVICE_MEASUREMENT, b"".join(b.encode() for b in blocks),
                   description=f"{device.device_id} measurements")
        self._emit(phase, EventKind.PCR_EXTEND, device.device_id, PASS, f"PCR[{PCR_DEVICE_MEASUREMENT}]")
        device.initialize()

    def run_dxe_pcie(self) -> None:
        for device in self.platform.on(Bus.PCIE):
            device.attach()
            self.enumeration_steps += 1
            if self.config.spdm_enabled:
                self._attest(Phase.DXE_PCIE, device)
            else:
                device.initialize()

    def _enumerate_usb(self, device: VirtualDevice) -> None:
        device.attach()
        setup = UsbSetupPacket(BM_DEVICE_TO_HOST, USB_GET_DESCRIPTOR, USB_DESCRIPTOR_DEVICE << 8, 0, 18)
        device.control(setup)
        self.enumeration_steps += 2

    def run_dxe_usb(self) -> None:
        """USB devices are attested before the SMM lock; later arrivals are refused."""
        for device in self.platform.on(Bus.USB):
            self._enumerate_usb(device)
            if self.config.spdm_enabled:
                self._attest(Phase.DXE_USB, device)
            else:
                device.initialize()
        self._emit(Phase.SMM_LOCK, EventKind.SMM_LOCK, FIRMWARE_SUBJECT, PASS,
                   "SMM locked; USB enumeration closed")
        if self.config.hotplug:
            for device in self.platform.hotplug:
                self.enumeration_steps += 1
                device.quarantine()
                self._emit(Phase.SMM_LOCK, EventKind.QUARANTINE, device.device_id,
                           Outcome(StatusCode.HOTPLUG_AFTER_SMM_LOCK),
                           "USB device attached after SMM lock; rejected")

    def boot_select(self) -> BootResult:
        for device in self.platform.devices:
            self.enumeration_steps += 1
            if device.initialized and device.bootable:
                self._emit(Phase.BOOT_SELECT, EventKind.HANDOFF, device.device_id, PASS,
                           f"boot loader handoff via {device.device_id}")
                return BootResult.BOOTED
        self._emit(Phase.BOOT_SELECT, EventKind.HANDOFF, FIRMWARE_SUBJECT,
                   Outcome(StatusCode.NO_BOOT_DEVICE), "no bootable device")
        return BootResult.NO_BOOT_DEVICE

    def run(self) -> BootReport:
        store = self.platform.flash.variables_section
        if self.config.spdm_enabled:
            self.firmware = FirmwareContext.from_store(store)
        code_digest = self.platform.flash.code_digest()
        counter = CryptoCounter()
        with count_crypto_ops(counter):
            result = self.preboot_verify()
            if result is None:
                self.run_pei()
                self.run_dxe_pcie()
                self.run_dxe_usb()
                result = self.boot_select()
        if self.platform.flash.code_digest() != code_digest:
            raise AssertionError("code section changed during boot")
        tpm = self.platform.tpm
        metrics = MetricsSample(
            spdm_messages_sent=self.tap.requests_sent,
            transport_frames=len(self.tap.frames),
            hash_ops=counter.hash, sign_ops=counter.sign, verify_ops=counter.verify,
            pcr_extends=tpm.extend_count,
            enumeration_steps=self.enumeration_steps)
        pcrs = {i: tpm.read(i, HashAlgorithm.SHA256).hex() for i in range(PCR_COUNT)}
        return BootReport(list(self.events), result, metrics, list(self.diagnostics), pcrs,
                          list(self.tap.frames))


def preboot_verify(platform: Platform) -> BootResult | None:
    return BootOrchestrator(platform).preboot_verify()


def run_boot(platform: Platform, config: BootConfig = BootConfig()) -> BootReport:
    return BootOrchestrator(platform, config).run()
