"""Per-connection state shared by requester and responder."""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from ..codes import StatusCode
from ..crypto import CertificateChain, HashAlgorithm, hash_bytes
from .errors import SpdmError
from .messages import Reader, Version


class Role(enum.Enum):
    REQUESTER = "requester"
    RESPONDER = "responder"


class State(enum.IntEnum):
    FRESH = 0
    VCA_DONE = 1
    AUTHENTICATED = 2
    MEASURED = 3
    SESSION_ESTABLISHED = 4
    FAILED = 99


class Capability(enum.IntFlag):
    CERT = 1 << 1
    CHAL = 1 << 2
    MEAS_SIG = 1 << 4
    ENCRYPT = 1 << 6
    MAC = 1 << 7
    MUT_AUTH = 1 << 8
    KEY_EX = 1 << 9
    ENCAP = 1 << 12
    HANDSHAKE_IN_THE_CLEAR = 1 << 15


ALL_CAPABILITIES = (Capability.CERT | Capability.CHAL | Capability.MEAS_SIG | Capability.ENCRYPT
                    | Capability.MAC | Capability.MUT_AUTH | Capability.KEY_EX | Capability.ENCAP
                    | Capability.HANDSHAKE_IN_THE_CLEAR)


class AsymAlgo(enum.IntFlag):
    RSASSA_2048 = 0x01
    RSAPSS_2048 = 0x02
    ECDSA_P256 = 0x10


class HashAlgo(enum.IntFlag):
    SHA_256 = 0x01
    SHA_384 = 0x02
    SHA_512 = 0x04


class AeadAlgo(enum.IntFlag):
    AES_128_GCM = 0x01
    AES_256_GCM = 0x02
    CHACHA20_POLY1305 = 0x04


class DheAlgo(enum.IntFlag):
    FFDHE_2048 = 0x01
    FFDHE_3072 = 0x02
    SECP256R1 = 0x08


HASH_FOR = {
    HashAlgo.SHA_256: HashAlgorithm.SHA256,
    HashAlgo.SHA_384: HashAlgorithm.SHA384,
    HashAlgo.SHA_512: HashAlgorithm.SHA512,
}

MEASUREMENT_SPEC_DMTF = 0x01


@dataclass(frozen=True)
class AlgorithmSelection:
    asymmetric: AsymAlgo
    hash: HashAlgo
    symmetric: AeadAlgo
    key_exchange: DheAlgo

    @property
    def hash_algorithm(self) -> HashAlgorithm:
        return HASH_FOR[self.hash]


@dataclass(frozen=True)
class EndpointConfig:
    """What an endpoint advertises. Preference order is the tuple order."""

    versions: tuple[Version, ...] = ((1, 2), (1, 3))
    capabilities: Capability = ALL_CAPABILITIES
    asymmetric: tuple[AsymAlgo, ...] = (AsymAlgo.RSASSA_2048,)
    hashes: tuple[HashAlgo, ...] = (HashAlgo.SHA_256,)
    symmetric: tuple[AeadAlgo, ...] = (AeadAlgo.AES_256_GCM, AeadAlgo.AES_128_GCM)
    key_exchange: tuple[DheAlgo, ...] = (DheAlgo.FFDHE_2048,)
    ct_exponent: int = 12

    @staticmethod
    def mask(values) -> int:
        out = 0
        for v in values:
            out |= int(v)
        return out


class MeasurementType(enum.IntEnum):
    FIRMWARE_HASH = 0x00
    CONFIG_HASH = 0x01
    RAW_DATA = 0x7F

    @property
    def is_hash(self) -> bool:
        return self is not MeasurementType.RAW_DATA


@dataclass(frozen=True)
class MeasurementBlock:
    index: int
    type: MeasurementType
    value: bytes

    def encode(self) -> bytes:
        """index (1) | type (1) | size (2) | value."""
        return struct.pack("<BBH", self.index, int(self.type), len(self.value)) + self.value

    @classmethod
    def read(cls, r: Reader) -> "MeasurementBlock":
        index, type_ = r.u8(), r.u8()
        value = r.take(r.u16())
        try:
            type_ = MeasurementType(type_)
        except ValueError:
            raise SpdmError(StatusCode.INVALID_REQUEST, f"unknown measurement type {type_}") from None
        return cls(index, type_, value)


@dataclass
class SessionState:
    session_id: int
    handshake_secret: bytes
    data_secret: bytes = b""
    established: bool = False


@dataclass
class ConnectionContext:
    role: Role
    state: State = State.FRESH
    failure_code: int | None = None
    negotiated_version: Version | None = None
    local_capabilities: Capability = Capability(0)
    peer_capabilities: Capability = Capability(0)
    algorithms: AlgorithmSelection | None = None
    transcript_vca: bytearray = field(default_factory=bytearray)
    # Challenge transcript after VCA (digests, certificate, challenge); signed as VCA ‖ this.
    transcript_m1m2: bytearray = field(default_factory=bytearray)
    transcript_l1l2: bytearray = field(default_factory=bytearray)
    transcript_th: bytearray = field(default_factory=bytearray)
    transcript_encap: bytearray = field(default_factory=bytearray)
    message_log: bytearray = field(default_factory=bytearray)
    peer_cert_digests: list[bytes] = field(default_factory=list)
    peer_cert_chain: CertificateChain | None = None
    peer_cert_blob: bytes | None = None
    challenge_transcript_hash: bytes | None = None
    measurement_transcript_hash: bytes | None = None
    mutual_auth_done: bool = False
    session: SessionState | None = None

    @property
    def failed(self) -> bool:
        return self.state is State.FAILED

    def advance(self, new: State) -> None:
        """Move forward; never backward, and never out of FAILED."""
        if self.state is State.FAILED:
            raise SpdmError(self.failure_code or StatusCode.UNEXPECTED_REQUEST,
                            "connection already failed")
        if new > self.state:
            self.state = new

    def fail(self, code: int) -> None:
        if self.state is not State.FAILED:
            self.state = State.FAILED
            self.failure_code = int(code)

    @property
    def hash_algorithm(self) -> HashAlgorithm:
        return self.algorithms.hash_algorithm if self.algorithms else HashAlgorithm.SHA256

    def hash(self, data: bytes) -> bytes:
        return hash_bytes(data, self.hash_algorithm)

    def transcript_hashes(self) -> dict[str, str]:
        """Hex digests of every transcript; used to compare both ends of a connection."""
        names = ("vca", "m1m2", "l1l2", "th", "encap")
        out = {n: hash_bytes(bytes(getattr(self, f"transcript_{n}"))).hex() for n in names}
        out["messages"] = hash_bytes(bytes(self.message_log)).hex()
        return out
