import json

import pytest

from spdm_boot.boot import (
    MSG_FIRMWARE_MODIFIED, PHASE_ORDER, BootConfig, BootResult, ConfigurationError, EventKind, Phase,
    preboot_verify, run_boot,
)
from spdm_boot.codes import StatusCode
from spdm_boot.efi_store import (EXPECTED_HCRTM, PLATFORM_GUID, REQUESTER_PRIVATE_KEY, FlashImage,
                                 Mutation, tamper_variable)
from spdm_boot.harness import (ScenarioConfig, build_platform, provision_platform, rogue_identity,
                               run_scenario)
from spdm_boot.platform import Bus, DeviceSpec, Topology, default_topology

AUTH = StatusCode.AUTHENTICATION_FAILURE


def first_phase_positions(report):
    seen = []
    for e in report.events:
        if e.phase not in seen:
            seen.append(e.phase)
    return seen


def kinds_for(report, subject):
    return [(e.kind, str(e.outcome)) for e in report.events_for(subject)]


@pytest.fixture(scope="module")
def booted():
    return run_scenario(ScenarioConfig(1))


def test_scenario1_event_shape(booted):
    assert booted.result is BootResult.BOOTED
    assert not booted.failures()
    assert first_phase_positions(booted) == PHASE_ORDER
    assert [e.sequence_no for e in booted.events] == list(range(1, len(booted.events) + 1))
    pcie_extends = [e for e in booted.events
                    if e.phase is Phase.DXE_PCIE and e.kind is EventKind.PCR_EXTEND]
    assert len(pcie_extends) == 10
    assert booted.events[-1].kind is EventKind.HANDOFF and booted.events[-1].subject == "nvme0"


def test_pei_mutual_auth_passes_before_dxe(booted):
    pei = [e for e in booted.events if e.phase is Phase.PEI]
    assert [(e.kind, e.subject, str(e.outcome)) for e in pei] == [(EventKind.SPDM_AUTH, "tpm", "Pass")]
    first_dxe = next(i for i, e in enumerate(booted.events) if e.phase is Phase.DXE_PCIE)
    assert booted.events.index(pei[0]) < first_dxe


def test_usb_devices_attested_before_smm_lock(booted):
    lock = next(i for i, e in enumerate(booted.events) if e.kind is EventKind.SMM_LOCK)
    usb = [i for i, e in enumerate(booted.events) if e.phase is Phase.DXE_USB]
    assert usb and max(usb) < lock


def test_pcr_values_are_folds_of_the_log(material):
    platform = build_platform(material)
    report = run_boot(platform)
    import hashlib
    pcr = [bytes(32)] * 24
    for entry in platform.tpm.nv_log:
        pcr[entry.index] = entry.digest
    assert {i: v.hex() for i, v in enumerate(pcr)} == report.pcrs
    assert report.pcrs[0] == hashlib.sha256(
        b"\x04" + hashlib.sha256(material.flash.code_section).digest()).hexdigest()


def test_tpm_auth_failure_is_not_fatal(material):
    platform = build_platform(material, identity_overrides={"tpm": rogue_identity(0)})
    report = run_boot(platform)
    assert kinds_for(report, "tpm") == [(EventKind.SPDM_AUTH, "Fail(0x80000030)")]
    assert report.result is BootResult.BOOTED


def test_rogue_usb_keyboard_is_quarantined(material):
    report = run_scenario(ScenarioConfig(1, rogue_devices=("usb-kbd0",)))
    assert kinds_for(report, "usb-kbd0") == [(EventKind.SPDM_AUTH, "Fail(0x80000030)"),
                                            (EventKind.QUARANTINE, "Fail(0x80000030)")]
    assert report.result is BootResult.BOOTED
    assert report.events[-1].phase is Phase.BOOT_SELECT


def test_quarantined_nvme_leaves_no_boot_device():
    topo = Topology((DeviceSpec("nvme0", Bus.PCIE, "nvme-storage"), DeviceSpec("gpu0", Bus.PCIE, "gpu")))
    report = run_scenario(ScenarioConfig(1, topology=topo, rogue_devices=("nvme0",)))
    assert report.result is BootResult.NO_BOOT_DEVICE
    assert report.events[-1].outcome.code == StatusCode.NO_BOOT_DEVICE


def test_no_storage_means_no_boot_device():
    topo = Topology((DeviceSpec("gpu0", Bus.PCIE, "gpu"), DeviceSpec("kbd", Bus.USB, "keyboard")))
    assert run_scenario(ScenarioConfig(1, topology=topo)).result is BootResult.NO_BOOT_DEVICE


def test_usb_storage_boots_when_nvme_quarantined():
    report = run_scenario(ScenarioConfig(1, rogue_devices=("nvme0",)))
    assert report.result is BootResult.BOOTED
    assert report.events[-1].subject == "usb-storage0"


def test_quarantine_completeness(material):
    flash = FlashImage(material.flash.code_section,
                       tamper_variable(material.store, "RequesterSpdmCertChain", Mutation(offset=156, xor=1)))
    platform = build_platform(material, flash=flash)
    report = run_boot(platform)
    failed = {e.subject for e in report.failures() if e.outcome.code == AUTH}
    assert failed == {d.device_id for d in platform.devices}
    assert all(not d.initialized and d.quarantined and d.allocated is None for d in platform.devices)


def test_hotplug_after_lock_rejected_without_spdm():
    topo = Topology(default_topology().devices, (DeviceSpec("usb-late0", Bus.USB, "storage", bootable=True),))
    material = provision_platform(0, topo)
    platform = build_platform(material)
    report = run_boot(platform)
    late = report.events_for("usb-late0")
    assert [(e.phase, e.kind, e.outcome.code) for e in late] == [
        (Phase.SMM_LOCK, EventKind.QUARANTINE, StatusCode.HOTPLUG_AFTER_SMM_LOCK)]
    device = platform.device("usb-late0")
    assert not device.responder.ctx.message_log and device.quarantined
    assert report.result is BootResult.BOOTED


def test_missing_variables_is_configuration_error(material):
    store = material.store.copy(write_protected=False)
    del store.variables[(PLATFORM_GUID, EXPECTED_HCRTM)]
    platform = build_platform(material, flash=FlashImage(material.flash.code_section, store))
    with pytest.raises(ConfigurationError):
        run_boot(platform)
    with pytest.raises(ConfigurationError):
        preboot_verify(platform)
    store = material.store.copy(write_protected=False)
    del store.variables[(PLATFORM_GUID, REQUESTER_PRIVATE_KEY)]
    orchestrated = build_platform(material, flash=FlashImage(material.flash.code_section, store))
    with pytest.raises(ConfigurationError):
        run_boot(orchestrated)


def test_preboot_halt_short_circuits(material):
    code = bytearray(material.flash.code_section)
    code[0] ^= 1
    platform = build_platform(material, flash=FlashImage(bytes(code), material.store))
    report = run_boot(platform)
    assert report.result is BootResult.HALTED_INTEGRITY
    assert report.diagnostics == [MSG_FIRMWARE_MODIFIED]
    assert platform.tpm.responder.ctx.message_log == bytearray()
    assert all(not d.initialized for d in platform.devices)


def test_baseline_skips_spdm_but_enumerates(material):
    report = run_boot(build_platform(material), BootConfig(spdm_enabled=False))
    assert report.result is BootResult.BOOTED
    assert report.metrics.spdm_messages_sent == 0 and report.metrics.transport_frames == 0
    assert report.metrics.enumeration_steps > 0
    assert not any(e.kind in (EventKind.SPDM_AUTH, EventKind.SPDM_MEASURE) for e in report.events)


def test_metrics_add_up(booted):
    m = booted.metrics
    assert m.simulated_steps == (m.spdm_messages_sent + m.transport_frames + m.crypto_ops
                                 + m.pcr_extends + m.enumeration_steps)
    assert m.spdm_messages_sent * 2 <= m.transport_frames


def test_serialization_is_json_lines(booted):
    lines = booted.serialize().splitlines()
    records = [json.loads(line) for line in lines]
    assert [r["record"] for r in records].count("event") == len(booted.events)
    summary = records[-1]
    assert summary["record"] == "summary" and summary["result"] == "Booted" and summary["exit_status"] == 0
    assert set(records[0]) == {"record", "seq", "phase", "kind", "subject", "outcome", "detail"}


@pytest.mark.parametrize("chunk", [8, 64, 512])
def test_usb_chunk_limit_changes_frames_not_outcome(chunk):
    report = run_scenario(ScenarioConfig(1, usb_chunk_limit=chunk))
    assert report.result is BootResult.BOOTED and not report.failures()
