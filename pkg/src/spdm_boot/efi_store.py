"""Flash image and EFI variable store.

The flash image has an immutable code section and a mutable variables
section. Variable stores serialize to a flat YAML document, one record per
variable with the fields ``guid``, ``name``, ``attributes``, ``timestamp``
and ``data_b64``.
"""
from __future__ import annotations

import base64
import binascii
import datetime as dt
import hashlib
import uuid
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping

import yaml

from .crypto import CertificateChain, Identity, SignedDigest, TrustAnchorSet

# Platform namespace for every variable this package provisions.
PLATFORM_GUID = uuid.UUID("6b5a3f2e-1d4c-4e8b-9a7f-3c2d1e0f5a6b")

PK = "PK"
KEK = "KEK"
DB = "db"
EXPECTED_HCRTM = "ExpectedHcrtm"
HCRTM_SIGNATURE = "HcrtmSignature"
REQUESTER_CERT_CHAIN = "RequesterSpdmCertChain"
REQUESTER_PRIVATE_KEY = "RequesterSpdmPrivateKey"
RESPONDER_CERT_CHAIN_PREFIX = "ResponderSpdmCertChain."

# EFI_VARIABLE_NON_VOLATILE | BOOTSERVICE_ACCESS | RUNTIME_ACCESS
NV_BS_RT = 0x07
# ... | TIME_BASED_AUTHENTICATED_WRITE_ACCESS
NV_BS_RT_AT = 0x27


def responder_chain_name(device_id: str) -> str:
    return RESPONDER_CERT_CHAIN_PREFIX + device_id


class VariableStoreError(Exception):
    pass


class ParseError(VariableStoreError, ValueError):
    pass


class DuplicateVariable(VariableStoreError, KeyError):
    pass


class WriteProtected(VariableStoreError):
    pass


class MissingInput(VariableStoreError, ValueError):
    pass


@dataclass(frozen=True)
class EfiVariable:
    guid: uuid.UUID
    name: str
    attributes: int
    data: bytes
    timestamp: dt.datetime | None = None

    def __post_init__(self):
        try:
            self.name.encode("utf-16-le")
        except UnicodeEncodeError:
            raise ValueError(f"variable name not UTF-16 representable: {self.name!r}") from None

    @property
    def key(self) -> tuple[uuid.UUID, str]:
        return (self.guid, self.name)


@dataclass
class VariableStore:
    variables: dict[tuple[uuid.UUID, str], EfiVariable] = field(default_factory=dict)
    write_protected: bool = False

    def set(self, var: EfiVariable) -> None:
        if self.write_protected:
            raise WriteProtected(f"store is write protected: cannot set {var.name}")
        self.variables[var.key] = var

    def get(self, guid: uuid.UUID, name: str) -> EfiVariable | None:
        return self.variables.get((guid, name))

    def names(self) -> list[str]:
        return [name for (_, name) in self.variables]

    def copy(self, *, write_protected: bool | None = None) -> "VariableStore":
        wp = self.write_protected if write_protected is None else write_protected
        return VariableStore(dict(self.variables), wp)

    def __len__(self) -> int:
        return len(self.variables)


def get_variable(store: VariableStore, guid: uuid.UUID, name: str) -> EfiVariable | None:
    return store.get(guid, name)


def get_data(store: VariableStore, name: str, guid: uuid.UUID = PLATFORM_GUID) -> bytes | None:
    var = store.get(guid, name)
    return None if var is None else var.data


# --- text serialization -----------------------------------------------------

def _format_timestamp(ts: dt.datetime | None) -> str | None:
    return None if ts is None else ts.isoformat()


def serialize_store(store: VariableStore) -> str:
    records = []
    for var in store.variables.values():
        records.append({
            "guid": str(var.guid),
            "name": var.name,
            "attributes": var.attributes,
            "timestamp": _format_timestamp(var.timestamp),
            "data_b64": base64.b64encode(var.data).decode("ascii"),
        })
    return yaml.safe_dump({"variables": records}, sort_keys=False, default_flow_style=False)


_FIELDS = ("guid", "name", "attributes", "timestamp", "data_b64")


def deserialize_store(doc: str) -> VariableStore:
    try:
        loaded = yaml.safe_load(doc)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark is not None else ""
        raise ParseError(f"invalid variable store document{where}: {exc}") from None
    if loaded is None:
        loaded = {"variables": []}
    if not isinstance(loaded, dict) or not isinstance(loaded.get("variables", []), list):
        raise ParseError("document must be a mapping with a 'variables' list")

    store = VariableStore()
    for i, rec in enumerate(loaded.get("variables") or []):
        ctx = f"record {i}"
        if not isinstance(rec, dict):
            raise ParseError(f"{ctx}: expected a mapping")
        unknown = set(rec) - set(_FIELDS)
        missing = {"guid", "name", "attributes", "data_b64"} - set(rec)
        if unknown or missing:
            raise ParseError(f"{ctx}: unknown fields {sorted(unknown)} / missing {sorted(missing)}")
        ctx = f"record {i} ({rec['name']!r})"
        try:
            guid = uuid.UUID(str(rec["guid"]))
        except ValueError:
            raise ParseError(f"{ctx}: bad guid {rec['guid']!r}") from None
        if not isinstance(rec["attributes"], int) or rec["attributes"] < 0:
            raise ParseError(f"{ctx}: attributes must be a non-negative integer")
        try:
            data = base64.b64decode(str(rec["data_b64"]), validate=True)
        except (binascii.Error, ValueError):
            raise ParseError(f"{ctx}: malformed base64 data") from None
        ts = rec.get("timestamp")
        if ts is not None:
            try:
                ts = ts if isinstance(ts, dt.datetime) else dt.datetime.fromisoformat(str(ts))
            except ValueError:
                raise ParseError(f"{ctx}: bad timestamp {ts!r}") from None
        try:
            var = EfiVariable(guid, str(rec["name"]), rec["attributes"], data, ts)
        except ValueError as exc:
            raise ParseError(f"{ctx}: {exc}") from None
        if var.key in store.variables:
            raise DuplicateVariable(f"{ctx}: duplicate variable {var.name} in {guid}")
        store.set(var)
    return store


# --- flash -------------------------------------------------------------------

@dataclass
class FlashImage:
    code_section: bytes
    variables_section: VariableStore = field(default_factory=VariableStore)

    def __post_init__(self):
        self.code_section = bytes(self.code_section)

    def code_digest(self) -> bytes:
        # Bookkeeping digest for immutability checks; not counted as a crypto op.
        return hashlib.sha256(self.code_section).digest()


def default_code_section(size: int = 64 * 1024) -> bytes:
    """Deterministic stand-in for the firmware code volume."""
    block = hashlib.sha256(b"spdm-boot firmware code volume").digest()
    out = bytearray()
    counter = 0
    while len(out) < size:
        out += hashlib.sha256(block + counter.to_bytes(4, "little")).digest()
        counter += 1
    return bytes(out[:size])


# --- provisioning ------------------------------------------------------------------

def provision(store: VariableStore, anchors: TrustAnchorSet | None, hcrtm: SignedDigest | None,
              requester: Identity | None, device_chains: Mapping[str, CertificateChain] | None,
              *, timestamp: dt.datetime | None = None,
              guid: uuid.UUID = PLATFORM_GUID) -> VariableStore:
    """Return a new store with every well-known variable populated."""
    if store.write_protected:
        raise WriteProtected("cannot provision a write-protected store")
    for label, value in (("anchors", anchors), ("hcrtm", hcrtm),
                         ("requester identity", requester), ("device chains", device_chains)):
        if value is None:
            raise MissingInput(f"provisioning requires {label}")

    out = store.copy()

    def put(name: str, data: bytes, attributes: int = NV_BS_RT) -> None:
        out.set(EfiVariable(guid, name, attributes, bytes(data), timestamp))

    put(PK, anchors.pk.to_blob(), NV_BS_RT_AT)
    put(KEK, anchors.kek.to_blob(), NV_BS_RT_AT)
    put(DB, b"".join(anchors.db), NV_BS_RT_AT)
    put(EXPECTED_HCRTM, hcrtm.digest)
    put(HCRTM_SIGNATURE, hcrtm.signature)
    put(REQUESTER_CERT_CHAIN, requester.blob)
    put(REQUESTER_PRIVATE_KEY, requester.key.private_key)
    for device_id, chain in device_chains.items():
        put(responder_chain_name(device_id), chain.to_blob())
    return out


def tamper_variable(store: VariableStore, name: str,
                    mutation: Callable[[bytes], bytes] | "Mutation",
                    guid: uuid.UUID = PLATFORM_GUID) -> VariableStore:
    """Copy of ``store`` with one variable's data rewritten by ``mutation``.

    Bypasses write protection: it models an attacker editing the flash image.
    """
    var = store.get(guid, name)
    if var is None:
        raise KeyError(f"no such variable: {name}")
    out = store.copy()
    out.variables[var.key] = replace(var, data=bytes(mutation(var.data)))
    return out


@dataclass(frozen=True)
class Mutation:
    """Byte-level edit: XOR ``xor`` into ``offset``, then optionally truncate."""

    offset: int = 0
    xor: int = 0
    truncate: int = 0
    replacement: bytes | None = None

    def __call__(self, data: bytes) -> bytes:
        if self.replacement is not None:
            return self.replacement
        buf = bytearray(data)
        if self.xor:
            buf[self.offset] ^= self.xor
        if self.truncate:
            del buf[len(buf) - self.truncate:]
        return bytes(buf)


def flip_byte(offset: int = 0, xor: int = 0xFF) -> Mutation:
    return Mutation(offset=offset, xor=xor)


def identity_mutation() -> Mutation:
    return Mutation()


def variables_from(records: Iterable[EfiVariable]) -> VariableStore:
    store = VariableStore()
    for var in records:
        if var.key in store.variables:
            raise DuplicateVariable(var.name)
        store.set(var)
    return store
