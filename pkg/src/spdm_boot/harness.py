"""Provisioning, the four reference scenarios, and run statistics."""
from __future__ import annotations

import datetime as dt
import functools
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .boot import BootConfig, BootReport, run_boot
from .crypto import (Identity, KeyPair, PlatformIdentity, RandomSource,
                     generate_keypair, generate_platform_identity, hash_bytes, make_chain, sign)
from .efi_store import (HCRTM_SIGNATURE, REQUESTER_CERT_CHAIN, FlashImage, Mutation, VariableStore,
                        default_code_section, provision, tamper_variable)
from .platform import (DeviceSpec, Platform, ResponderRegistry, Topology, VirtualDevice,
                       VirtualTpm, default_topology, registry_key)
from .spdm import MeasurementBlock, MeasurementType, MutAuthMode, Responder, RequesterTrust

PROVISIONING_TIME = dt.datetime(2025, 1, 1, tzinfo=dt.timezone.utc)
SPDM_CA_SUBJECT = "Platform SPDM CA"
TPM_CA_SUBJECT = "TPM Manufacturer CA"


# --- provisioning ---------------------------------------------------------------------

@dataclass(frozen=True)
class ProvisionedPlatform:
    """Everything generated once per identity seed and reused across boots."""

    seed: int
    topology: Topology
    flash: FlashImage
    platform_identity: PlatformIdentity
    requester: Identity
    device_identities: Mapping[str, Identity]
    tpm_identity: Identity

    @property
    def store(self) -> VariableStore:
        return self.flash.variables_section


def _leaf_identity(ca: KeyPair, ca_subject: str, leaf_subject: str, rng: RandomSource) -> Identity:
    key = generate_keypair(rng)
    return Identity(make_chain([ca_subject, leaf_subject], [ca, key]), key)


@functools.lru_cache(maxsize=16)
def provision_platform(seed: int = 0, topology: Topology | None = None) -> ProvisionedPlatform:
    """Generate keys, chains and a provisioned, write-protected variable store."""
    topology = topology or default_topology()
    rng = RandomSource(seed)
    code = default_code_section()
    platform_identity = generate_platform_identity(code, rng.fork("platform"))

    spdm_ca = generate_keypair(rng.fork("spdm-ca"))
    requester = _leaf_identity(spdm_ca, SPDM_CA_SUBJECT, "firmware-requester", rng.fork("requester"))
    shared = _leaf_identity(spdm_ca, SPDM_CA_SUBJECT, "spdm-device", rng.fork("device"))
    devices = {}
    for spec in topology.devices + topology.hotplug:
        devices[spec.device_id] = (shared if spec.identity == "shared" else _leaf_identity(
            spdm_ca, SPDM_CA_SUBJECT, spec.device_id, rng.fork(f"device/{spec.device_id}")))
    tpm_ca = generate_keypair(rng.fork("tpm-ca"))
    tpm = _leaf_identity(tpm_ca, TPM_CA_SUBJECT, "tpm-ek", rng.fork("tpm"))

    chains = {device_id: ident.chain for device_id, ident in devices.items()}
    chains["tpm"] = tpm.chain
    store = provision(VariableStore(), platform_identity.anchors, platform_identity.hcrtm,
                      requester, chains, timestamp=PROVISIONING_TIME)
    store.write_protected = True
    return ProvisionedPlatform(seed, topology, FlashImage(code, store), platform_identity,
                               requester, devices, tpm)


@functools.lru_cache(maxsize=16)
def rogue_key(seed: int) -> KeyPair:
    """A key the platform has never seen; used to forge signatures."""
    return generate_keypair(RandomSource(seed).fork("rogue"))


@functools.lru_cache(maxsize=16)
def rogue_identity(seed: int) -> Identity:
    rng = RandomSource(seed).fork("rogue-ca")
    ca = generate_keypair(rng)
    return _leaf_identity(ca, "Rogue CA", "spdm-device", rng.fork("leaf"))


def measurement_blocks(firmware: bytes) -> tuple[MeasurementBlock, ...]:
    return (MeasurementBlock(1, MeasurementType.FIRMWARE_HASH, hash_bytes(firmware)),)


def build_platform(material: ProvisionedPlatform, *, seed: int = 0, flash: FlashImage | None = None,
                   identity_overrides: Mapping[str, Identity] | None = None,
                   responder_faults: Mapping[str, frozenset[str]] | None = None) -> Platform:
    """Fresh devices, TPM and responders for one power cycle."""
    rng = RandomSource(seed).fork("platform")
    overrides = identity_overrides or {}
    faults = responder_faults or {}
    requester_blob = material.requester.blob
    requester_root = material.requester.chain.root_hash

    tpm_ident = overrides.get("tpm", material.tpm_identity)
    tpm_responder = Responder(
        tpm_ident.blob, tpm_ident.key.private_key, rng=rng.fork("tpm"),
        mut_auth=MutAuthMode.BASIC, faults=faults.get("tpm", frozenset()),
        requester_trust=RequesterTrust(pinned_leaf_key=material.requester.key.public_key))
    tpm = VirtualTpm(tpm_responder)
    registry = ResponderRegistry()
    registry.register(ResponderRegistry.TPM_KEY, tpm_responder)

    def make(spec: DeviceSpec) -> VirtualDevice:
        ident = overrides.get(spec.device_id, material.device_identities[spec.device_id])
        responder = Responder(
            ident.blob, ident.key.private_key, rng=rng.fork(spec.device_id),
            measurements=measurement_blocks(spec.firmware_blob()), mut_auth=MutAuthMode.SESSION,
            faults=faults.get(spec.device_id, frozenset()),
            requester_trust=RequesterTrust(trusted_root_hash=requester_root,
                                           expected_chain_blob=requester_blob))
        device = VirtualDevice(spec, responder)
        registry.register(registry_key(device), responder)
        return device

    devices = [make(spec) for spec in material.topology.devices]
    hotplug = [make(spec) for spec in material.topology.hotplug]
    return Platform(flash or material.flash, tpm, devices, registry, hotplug)


# --- scenarios -------------------------------------------------------------------------

@dataclass(frozen=True)
class TamperSpec:
    """What the attacker changed before power-on."""

    target: str  # "none", "code", "hcrtm-signature", "variable"
    description: str
    variable: str | None = None
    mutation: Mutation | None = None


# Offset of a modulus byte inside the root certificate of RequesterSpdmCertChain:
# 4-byte blob header + 32-byte root hash, then well into the certificate body.
REQUESTER_ROOT_TAMPER_OFFSET = 4 + 32 + 120

SCENARIO_TAMPERS = {
    1: TamperSpec("none", "untampered platform"),
    2: TamperSpec("code", "firmware code section modified after provisioning"),
    3: TamperSpec("hcrtm-signature", "H-CRTM signed with an unrecognized private key"),
    4: TamperSpec("variable", "expected certificate RequesterSpdmCertChain tampered",
                  REQUESTER_CERT_CHAIN, Mutation(offset=REQUESTER_ROOT_TAMPER_OFFSET, xor=0x01)),
}

SCENARIO_RESULTS = {1: "Booted", 2: "HaltedIntegrity", 3: "HaltedAuthenticity", 4: "NoBootDevice"}


class UnknownScenario(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    scenario_id: int
    seed: int = 0
    topology: Topology | None = None
    tamper_spec: TamperSpec | None = None
    spdm_enabled: bool = True
    identity_seed: int | None = None
    # Extension: devices presenting an identity from an untrusted CA.
    rogue_devices: tuple[str, ...] = ()
    usb_chunk_limit: int = 64

    def __post_init__(self):
        if self.scenario_id not in SCENARIO_TAMPERS:
            raise UnknownScenario(f"unknown scenario {self.scenario_id}; expected 1..4")

    @property
    def tamper(self) -> TamperSpec:
        return self.tamper_spec or SCENARIO_TAMPERS[self.scenario_id]


def apply_tamper(material: ProvisionedPlatform, tamper: TamperSpec, seed: int) -> FlashImage:
    flash = material.flash
    if tamper.target == "none":
        return flash
    if tamper.target == "code":
        code = bytearray(flash.code_section)
        code[len(code) // 2] ^= 0xFF
        return FlashImage(bytes(code), flash.variables_section)
    if tamper.target == "hcrtm-signature":
        forged = sign(material.platform_identity.hcrtm.digest, rogue_key(seed).private_key)
        store = tamper_variable(flash.variables_section, HCRTM_SIGNATURE, Mutation(replacement=forged))
        return FlashImage(flash.code_section, store)
    if tamper.target == "variable":
        store = tamper_variable(flash.variables_section, tamper.variable, tamper.mutation)
        return FlashImage(flash.code_section, store)
    raise ValueError(f"unknown tamper target {tamper.target!r}")


def run_scenario(cfg: ScenarioConfig) -> BootReport:
    identity_seed = cfg.seed if cfg.identity_seed is None else cfg.identity_seed
    material = provision_platform(identity_seed, cfg.topology)
    flash = apply_tamper(material, cfg.tamper, identity_seed)
    overrides = {d: rogue_identity(identity_seed) for d in cfg.rogue_devices}
    platform = build_platform(material, seed=cfg.seed, flash=flash, identity_overrides=overrides)
    return run_boot(platform, BootConfig(seed=cfg.seed, spdm_enabled=cfg.spdm_enabled,
                                         usb_chunk_limit=cfg.usb_chunk_limit))


# --- statistics ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsSeries:
    label: str
    samples: tuple[float, ...]
    removed: int = 0

    @property
    def removed_fraction(self) -> float:
        total = len(self.samples) + self.removed
        return self.removed / total if total else 0.0

    @property
    def mean(self) -> float:
        return float(np.mean(self.samples))

    @property
    def stddev(self) -> float:
        return float(np.std(self.samples))


def zscore_filter(series: MetricsSeries, threshold: float = 2.0) -> MetricsSeries:
    """Drop samples with |z| > threshold (population stddev, single pass)."""
    if not series.samples:
        raise ValueError("cannot filter an empty series")
    x = np.asarray(series.samples, dtype=float)
    std = x.std()
    if std == 0:
        return series
    keep = np.abs((x - x.mean()) / std) <= threshold
    kept = tuple(float(v) for v in x[keep])
    return MetricsSeries(series.label, kept, series.removed + int((~keep).sum()))


@dataclass(frozen=True)
class OverheadRow:
    metric: str
    with_spdm: MetricsSeries
    without_spdm: MetricsSeries

    @property
    def overhead(self) -> float:
        base = self.without_spdm.mean
        if base == 0:
            return 0.0 if self.with_spdm.mean == 0 else math.inf
        return (self.with_spdm.mean - base) / base


@dataclass(frozen=True)
class OverheadReport:
    rows: tuple[OverheadRow, ...]

    def row(self, metric: str) -> OverheadRow:
        return next(r for r in self.rows if r.metric == metric)

    def to_text(self) -> str:
        def cell(s: MetricsSeries) -> str:
            return f"{s.mean:.2f} ± {s.stddev:.2f}"

        def pct(r: OverheadRow) -> str:
            return "n/a (baseline 0)" if math.isinf(r.overhead) else f"{r.overhead * 100:+.2f}%"

        header = ("metric", "with SPDM", "without SPDM", "overhead", "outliers removed")
        body = [(r.metric, cell(r.with_spdm), cell(r.without_spdm), pct(r),
                 f"{r.with_spdm.removed_fraction * 100:.1f}% / {r.without_spdm.removed_fraction * 100:.1f}%")
                for r in self.rows]
        widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header] + body]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


COMPARED_METRICS = ("simulated_steps", "spdm_messages_sent", "crypto_ops")


def compare_runs(with_spdm: Mapping[str, MetricsSeries] | MetricsSeries,
                 without_spdm: Mapping[str, MetricsSeries] | MetricsSeries) -> OverheadReport:
    if isinstance(with_spdm, MetricsSeries):
        with_spdm, without_spdm = {with_spdm.label: with_spdm}, {with_spdm.label: without_spdm}
    rows = []
    for metric, series in with_spdm.items():
        other = without_spdm[metric]
        if not series.samples or not other.samples:
            raise ValueError(f"empty series for {metric}")
        rows.append(OverheadRow(metric, series, other))
    return OverheadReport(tuple(rows))


def collect_series(scenario_id: int, runs: int, *, seed: int = 0, spdm_enabled: bool = True,
                   topology: Topology | None = None,
                   metrics: tuple[str, ...] = COMPARED_METRICS) -> dict[str, MetricsSeries]:
    """Run a scenario ``runs`` times with boot seeds seed, seed+1, ... over one provisioning."""
    values: dict[str, list[float]] = {m: [] for m in metrics}
    for i in range(runs):
        report = run_scenario(ScenarioConfig(scenario_id, seed=seed + i, topology=topology,
                                             spdm_enabled=spdm_enabled, identity_seed=seed))
        sample = report.metrics.as_dict()
        for m in metrics:
            values[m].append(float(sample[m]))
    return {m: MetricsSeries(m, tuple(v)) for m, v in values.items()}


def overhead_report(runs: int = 100, *, seed: int = 0, topology: Topology | None = None,
                    threshold: float = 2.0) -> OverheadReport:
    with_spdm = collect_series(1, runs, seed=seed, topology=topology, spdm_enabled=True)
    without = collect_series(1, runs, seed=seed, topology=topology, spdm_enabled=False)
    return compare_runs({m: zscore_filter(s, threshold) for m, s in with_spdm.items()},
                        {m: zscore_filter(s, threshold) for m, s in without.items()})
