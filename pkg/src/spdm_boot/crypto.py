"""Key material, certificates, hashing and signing for the simulated platform.

Everything here is deterministic given a :class:`RandomSource`: RSA primes are
drawn from the seeded stream, and signatures use PKCS#1 v1.5, so two runs
with the same seed produce byte-identical keys, certificates and signatures.

Certificates use a compact self-describing layout instead of X.509::

    magic "SCRT" | version (1) | subject_len (1) | subject | issuer_len (1) |
    issuer | is_ca (1) | not_before (4 BE) | not_after (4 BE) |
    public_key (4 BE exponent ‖ 256 byte modulus) | sig_len (2 BE) | signature

The signature covers every byte before ``sig_len``.
"""
from __future__ import annotations

import contextlib
import contextvars
import enum
import functools
import hashlib
import hmac
import json
import math
import os
import random
import secrets
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple

import gmpy2
from cryptography.exceptions import InvalidSignature
from cryptography.exceptions import UnsupportedAlgorithm as CryptographyUnsupported
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa


class CryptoError(Exception):
    pass


class UnsupportedAlgorithm(CryptoError, ValueError):
    pass


class MalformedKey(CryptoError, ValueError):
    pass


class ChainError(CryptoError, ValueError):
    pass


class HashAlgorithm(enum.Enum):
    SHA256 = "sha256"
    SHA384 = "sha384"
    SHA512 = "sha512"

    @property
    def digest_size(self) -> int:
        return hashlib.new(self.value).digest_size


class AsymAlgorithm(enum.Enum):
    RSA_2048_SHA256 = "rsa2048-sha256"


RSA_BITS = 2048
RSA_MODULUS_BYTES = RSA_BITS // 8
RSA_EXPONENT = 65537
PUBLIC_KEY_SIZE = 4 + RSA_MODULUS_BYTES
SIGNATURE_SIZE = RSA_MODULUS_BYTES


# --- operation counting -----------------------------------------------------

@dataclass
class CryptoCounter:
    hash: int = 0
    sign: int = 0
    verify: int = 0

    @property
    def total(self) -> int:
        return self.hash + self.sign + self.verify


_active_counter: contextvars.ContextVar[CryptoCounter | None] = contextvars.ContextVar(
    "spdm_boot_crypto_counter", default=None
)


@contextlib.contextmanager
def count_crypto_ops(counter: CryptoCounter) -> Iterator[CryptoCounter]:
    """Attribute every hash/sign/verify in the block to ``counter``."""
    token = _active_counter.set(counter)
    try:
        yield counter
    finally:
        _active_counter.reset(token)


def _tick(kind: str) -> None:
    counter = _active_counter.get()
    if counter is not None:
        setattr(counter, kind, getattr(counter, kind) + 1)


# --- randomness --------------------------------------------------------------

class RandomSource:
    """Seeded byte source; ``fork`` derives independent labelled sub-streams."""

    def __init__(self, seed: int):
        self.seed = seed
        self._rng = random.Random(seed)

    def bytes(self, n: int) -> bytes:
        return self._rng.randbytes(n)

    def getrandbits(self, k: int) -> int:
        return self._rng.getrandbits(k)

    def fork(self, label: str) -> "RandomSource":
        material = hashlib.sha256(f"{self.seed}/{label}".encode()).digest()
        return RandomSource(int.from_bytes(material[:8], "big"))


class EntropySource(RandomSource):
    """Operating-system entropy with the RandomSource interface."""

    def __init__(self):
        self.seed = None

    def bytes(self, n: int) -> bytes:
        return secrets.token_bytes(n)

    def getrandbits(self, k: int) -> int:
        return secrets.randbits(k)

    def fork(self, label: str) -> "EntropySource":
        return EntropySource()


# --- hashing -----------------------------------------------------------------

def hash_bytes(data: bytes, algorithm: HashAlgorithm = HashAlgorithm.SHA256) -> bytes:
    if not isinstance(algorithm, HashAlgorithm):
        try:
            algorithm = HashAlgorithm(algorithm)
        except ValueError:
            raise UnsupportedAlgorithm(f"unsupported hash algorithm: {algorithm!r}") from None
    _tick("hash")
    return hashlib.new(algorithm.value, bytes(data)).digest()


def hmac_digest(key: bytes, data: bytes, algorithm: HashAlgorithm = HashAlgorithm.SHA256) -> bytes:
    _tick("hash")
    return hmac.new(bytes(key), bytes(data), algorithm.value).digest()


# --- keys ----------------------------------------------------------------------

@dataclass(frozen=True)
class KeyPair:
    """RSA key pair. ``public_key`` is exponent (4 BE) ‖ modulus; ``private_key`` is PKCS#8 DER."""

    public_key: bytes
    private_key: bytes = field(repr=False)
    algorithm: AsymAlgorithm = AsymAlgorithm.RSA_2048_SHA256


def _random_prime(rng: RandomSource, bits: int) -> int:
    while True:
        candidate = rng.getrandbits(bits) | (0b11 << (bits - 2)) | 1
        p = int(gmpy2.next_prime(candidate))
        if p.bit_length() == bits and (p - 1) % RSA_EXPONENT != 0:
            return p


def encode_public_key(e: int, n: int) -> bytes:
    return struct.pack(">I", e) + n.to_bytes(RSA_MODULUS_BYTES, "big")


def generate_keypair(rng: RandomSource,
                     algorithm: AsymAlgorithm = AsymAlgorithm.RSA_2048_SHA256) -> KeyPair:
    if algorithm is not AsymAlgorithm.RSA_2048_SHA256:
        raise UnsupportedAlgorithm(f"unsupported asymmetric algorithm: {algorithm!r}")
    half = RSA_BITS // 2
    while True:
        p, q = _random_prime(rng, half), _random_prime(rng, half)
        n = p * q
        if p != q and n.bit_length() == RSA_BITS:
            break
    if q > p:
        p, q = q, p
    lam = math.lcm(p - 1, q - 1)
    d = pow(RSA_EXPONENT, -1, lam)
    numbers = rsa.RSAPrivateNumbers(
        p=p, q=q, d=d,
        dmp1=rsa.rsa_crt_dmp1(d, p),
        dmq1=rsa.rsa_crt_dmq1(d, q),
        iqmp=rsa.rsa_crt_iqmp(p, q),
        public_numbers=rsa.RSAPublicNumbers(RSA_EXPONENT, n),
    )
    key = numbers.private_key()
    der = key.private_bytes(serialization.Encoding.DER,
                            serialization.PrivateFormat.PKCS8,
                            serialization.NoEncryption())
    return KeyPair(encode_public_key(RSA_EXPONENT, n), der, algorithm)


@functools.lru_cache(maxsize=256)
def _load_private(private_key: bytes) -> rsa.RSAPrivateKey:
    try:
        key = serialization.load_der_private_key(private_key, password=None)
    except (ValueError, TypeError, CryptographyUnsupported) as exc:
        raise MalformedKey(f"cannot load private key: {exc}") from None
    if not isinstance(key, rsa.RSAPrivateKey) or key.key_size != RSA_BITS:
        raise MalformedKey("private key is not RSA-2048")
    return key


@functools.lru_cache(maxsize=512)
def _load_public(public_key: bytes) -> rsa.RSAPublicKey:
    if len(public_key) != PUBLIC_KEY_SIZE:
        raise MalformedKey("bad public key length")
    e = struct.unpack(">I", public_key[:4])[0]
    n = int.from_bytes(public_key[4:], "big")
    try:
        return rsa.RSAPublicNumbers(e, n).public_key()
    except ValueError as exc:
        raise MalformedKey(str(exc)) from None


def public_key_of(private_key: bytes) -> bytes:
    numbers = _load_private(bytes(private_key)).public_key().public_numbers()
    return encode_public_key(numbers.e, numbers.n)


def sign(data: bytes, private_key: bytes) -> bytes:
    key = _load_private(bytes(private_key))
    _tick("sign")
    return key.sign(bytes(data), padding.PKCS1v15(), hashes.SHA256())


def verify(data: bytes, signature: bytes, public_key: bytes) -> bool:
    """True iff ``signature`` is valid; malformed keys or signatures give False."""
    _tick("verify")
    try:
        key = _load_public(bytes(public_key))
        key.verify(bytes(signature), bytes(data), padding.PKCS1v15(), hashes.SHA256())
    except (InvalidSignature, MalformedKey, ValueError, TypeError):
        return False
    return True


# --- certificates --------------------------------------------------------------

CERT_MAGIC = b"SCRT"
CERT_VERSION = 1
DEFAULT_NOT_BEFORE = 1_700_000_000
DEFAULT_VALIDITY_DAYS = 3650


@dataclass(frozen=True)
class Certificate:
    subject: str
    issuer: str
    public_key: bytes
    is_ca: bool
    not_before: int
    not_after: int
    signature: bytes = b""

    def tbs_bytes(self) -> bytes:
        subject = self.subject.encode()
        issuer = self.issuer.encode()
        if len(subject) > 255 or len(issuer) > 255:
            raise ChainError("certificate name too long")
        return b"".join([
            CERT_MAGIC,
            bytes([CERT_VERSION, len(subject)]), subject,
            bytes([len(issuer)]), issuer,
            bytes([1 if self.is_ca else 0]),
            struct.pack(">II", self.not_before, self.not_after),
            self.public_key,
        ])

    def to_bytes(self) -> bytes:
        return self.tbs_bytes() + struct.pack(">H", len(self.signature)) + self.signature

    @classmethod
    def read_from(cls, data: bytes, offset: int = 0) -> tuple["Certificate", int]:
        """Parse one certificate at ``offset``; returns it and the offset past it."""
        view = bytes(data)

        def take(n: int) -> bytes:
            nonlocal offset
            if offset + n > len(view):
                raise ChainError("truncated certificate")
            chunk = view[offset:offset + n]
            offset += n
            return chunk

        if take(4) != CERT_MAGIC:
            raise ChainError("bad certificate magic")
        version, subject_len = take(2)
        if version != CERT_VERSION:
            raise ChainError(f"unsupported certificate version {version}")
        try:
            subject = take(subject_len).decode()
            issuer = take(take(1)[0]).decode()
        except UnicodeDecodeError:
            raise ChainError("certificate name is not UTF-8") from None
        flag = take(1)[0]
        if flag > 1:
            raise ChainError("bad CA flag")
        not_before, not_after = struct.unpack(">II", take(8))
        public_key = take(PUBLIC_KEY_SIZE)
        sig_len = struct.unpack(">H", take(2))[0]
        signature = take(sig_len)
        cert = cls(subject, issuer, public_key, bool(flag), not_before, not_after, signature)
        return cert, offset

    @classmethod
    def from_bytes(cls, data: bytes) -> "Certificate":
        cert, end = cls.read_from(data)
        if end != len(data):
            raise ChainError("trailing bytes after certificate")
        return cert


def issue_certificate(subject: str, public_key: bytes, issuer: str, issuer_key: bytes,
                      *, is_ca: bool = False, not_before: int = DEFAULT_NOT_BEFORE,
                      validity_days: int = DEFAULT_VALIDITY_DAYS) -> bytes:
    cert = Certificate(subject, issuer, public_key, is_ca, not_before,
                       not_before + validity_days * 86400)
    return replace(cert, signature=sign(cert.tbs_bytes(), issuer_key)).to_bytes()


@dataclass(frozen=True)
class CertificateChain:
    """Root-first list of encoded certificates plus the root digest."""

    root_hash: bytes
    certificates: tuple[bytes, ...]
    hash_algorithm: HashAlgorithm = HashAlgorithm.SHA256

    @classmethod
    def from_certificates(cls, certificates, hash_algorithm=HashAlgorithm.SHA256):
        certificates = tuple(bytes(c) for c in certificates)
        if not certificates:
            raise ChainError("certificate chain is empty")
        return cls(hash_bytes(certificates[0], hash_algorithm), certificates, hash_algorithm)

    @property
    def total_length(self) -> int:
        return 4 + len(self.root_hash) + sum(len(c) for c in self.certificates)

    @property
    def root(self) -> Certificate:
        return Certificate.from_bytes(self.certificates[0])

    @property
    def leaf(self) -> Certificate:
        return Certificate.from_bytes(self.certificates[-1])

    def to_blob(self) -> bytes:
        return build_spdm_cert_chain_blob(self)


def build_spdm_cert_chain_blob(chain: CertificateChain) -> bytes:
    """total_length (2 LE) ‖ reserved (2) ‖ root_hash ‖ certificates."""
    if not chain.certificates:
        raise ChainError("certificate chain is empty")
    total = chain.total_length
    if total > 0xFFFF:
        raise ChainError(f"certificate chain too large for 16-bit length: {total}")
    return struct.pack("<HH", total, 0) + chain.root_hash + b"".join(chain.certificates)


def parse_spdm_cert_chain_blob(blob: bytes,
                               hash_algorithm: HashAlgorithm = HashAlgorithm.SHA256
                               ) -> CertificateChain:
    blob = bytes(blob)
    size = hash_algorithm.digest_size
    if len(blob) < 4 + size:
        raise ChainError("certificate chain blob truncated")
    total, reserved = struct.unpack("<HH", blob[:4])
    if reserved != 0:
        raise ChainError("reserved field is not zero")
    if total != len(blob):
        raise ChainError(f"declared length {total} != actual {len(blob)}")
    root_hash = blob[4:4 + size]
    offset = 4 + size
    certificates = []
    while offset < len(blob):
        start = offset
        _, offset = Certificate.read_from(blob, offset)
        certificates.append(blob[start:offset])
    if not certificates:
        raise ChainError("certificate chain is empty")
    return CertificateChain(root_hash, tuple(certificates), hash_algorithm)


def verify_chain(chain: CertificateChain, trusted_root_hash: bytes | None = None) -> bool:
    """Check the root digest, the self-signed root and every issuer link."""
    try:
        if hash_bytes(chain.certificates[0], chain.hash_algorithm) != chain.root_hash:
            return False
        if trusted_root_hash is not None and chain.root_hash != trusted_root_hash:
            return False
        parsed = [Certificate.from_bytes(c) for c in chain.certificates]
    except (ChainError, IndexError):
        return False
    issuer = parsed[0]
    if issuer.issuer != issuer.subject or not issuer.is_ca:
        return False
    if not verify(issuer.tbs_bytes(), issuer.signature, issuer.public_key):
        return False
    for cert in parsed[1:]:
        if not issuer.is_ca or cert.issuer != issuer.subject:
            return False
        if not verify(cert.tbs_bytes(), cert.signature, issuer.public_key):
            return False
        issuer = cert
    return True


def make_chain(names: list[str], keys: list[KeyPair]) -> CertificateChain:
    """Chain where ``names[0]``/``keys[0]`` is a self-signed root and each next entry
    is issued by the previous one. All but the last certificate are CAs."""
    certs = []
    for i, (name, key) in enumerate(zip(names, keys, strict=True)):
        issuer_name, issuer_key = (name, key) if i == 0 else (names[i - 1], keys[i - 1])
        certs.append(issue_certificate(name, key.public_key, issuer_name, issuer_key.private_key,
                                       is_ca=i < len(names) - 1 or len(names) == 1))
    return CertificateChain.from_certificates(certs)


@dataclass(frozen=True)
class Identity:
    """An endpoint identity: a certificate chain and the leaf private key."""

    chain: CertificateChain
    key: KeyPair

    @property
    def blob(self) -> bytes:
        return self.chain.to_blob()


# --- platform provisioning ---------------------------------------------------------

@dataclass(frozen=True)
class TrustAnchorSet:
    pk: CertificateChain
    kek: CertificateChain
    db: tuple[bytes, ...]


@dataclass(frozen=True)
class SignedDigest:
    digest: bytes
    signature: bytes
    signer: CertificateChain


@dataclass(frozen=True)
class IdentityConfig:
    algorithm: AsymAlgorithm = AsymAlgorithm.RSA_2048_SHA256
    hash_algorithm: HashAlgorithm = HashAlgorithm.SHA256
    pk_subject: str = "Platform Key"
    kek_subject: str = "Key Exchange Key"
    not_before: int = DEFAULT_NOT_BEFORE
    validity_days: int = DEFAULT_VALIDITY_DAYS
    allowed_images: tuple[bytes, ...] = ()


class PlatformIdentity(NamedTuple):
    anchors: TrustAnchorSet
    hcrtm: SignedDigest
    pk_key: KeyPair
    kek_key: KeyPair


def generate_platform_identity(code_section: bytes, rng: RandomSource,
                               config: IdentityConfig = IdentityConfig()) -> PlatformIdentity:
    """PK (self-signed CA), DB, KEK signed by PK, H-CRTM digest, PK signature over it."""
    if code_section is None:
        raise CryptoError("no code section to measure")
    pk_key = generate_keypair(rng.fork("pk"), config.algorithm)
    pk_cert = issue_certificate(config.pk_subject, pk_key.public_key, config.pk_subject,
                                pk_key.private_key, is_ca=True, not_before=config.not_before,
                                validity_days=config.validity_days)
    pk = CertificateChain.from_certificates([pk_cert], config.hash_algorithm)

    db = tuple(hash_bytes(img, config.hash_algorithm) for img in config.allowed_images)

    kek_key = generate_keypair(rng.fork("kek"), config.algorithm)
    kek_cert = issue_certificate(config.kek_subject, kek_key.public_key, config.pk_subject,
                                 pk_key.private_key, is_ca=False, not_before=config.not_before,
                                 validity_days=config.validity_days)
    kek = CertificateChain.from_certificates([pk_cert, kek_cert], config.hash_algorithm)

    digest = hash_bytes(code_section, config.hash_algorithm)
    hcrtm = SignedDigest(digest, sign(digest, pk_key.private_key), pk)
    return PlatformIdentity(TrustAnchorSet(pk, kek, db), hcrtm, pk_key, kek_key)


def export_material(directory: str | os.PathLike, blobs: dict[str, bytes]) -> Path:
    """Write each blob as a raw file and an index manifest (name -> file path)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, data in sorted(blobs.items()):
        path = directory / f"{name}.bin"
        path.write_bytes(data)
        manifest[name] = path.name
    manifest_path = directory / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_material(manifest_path: str | os.PathLike) -> dict[str, bytes]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    return {name: (manifest_path.parent / rel).read_bytes() for name, rel in manifest.items()}
