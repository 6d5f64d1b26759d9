"""Command line entry point: ``spdm-boot {provision,run,scenario,report}``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import yaml

from .boot import ConfigurationError, EXIT_STATUS, BootReport
from .efi_store import serialize_store
from .harness import ScenarioConfig, UnknownScenario, overhead_report, provision_platform, run_scenario
from .platform import dump_topology, load_topology

EX_USAGE = 64
EX_CONFIG = 78


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EX_USAGE)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
    p.add_argument("--topology", type=Path, help="platform topology file")
    return p


def _boot_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--no-spdm", action="store_true", help="baseline boot without any SPDM exchange")
    p.add_argument("--log", type=Path, help="write the full report log (one JSON record per line)")
    p.add_argument("--quiet", action="store_true", help="print only the summary")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spdm-boot", description="Simulate an SPDM-protected UEFI boot.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("provision", parents=[_common()],
                       help="generate keys, flash code section and variable store")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("run", parents=[_common(), _boot_options()], help="single boot from a config file")
    p.add_argument("--config", type=Path, help="run configuration file")

    p = sub.add_parser("scenario", parents=[_common(), _boot_options()], help="run a reference scenario")
    p.add_argument("scenario_id", type=int, choices=[1, 2, 3, 4])

    p = sub.add_parser("report", parents=[_common()],
                       help="aggregate runs with and without SPDM and compare")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--threshold", type=float, default=2.0, help="z-score cutoff")
    return parser


def _topology(args):
    return load_topology(args.topology) if args.topology else None


def _load_run_config(path: Path | None) -> dict:
    if path is None:
        return {}
    data = yaml.safe_load(path.read_text()) or {}
    known = {"scenario", "seed", "spdm_enabled", "topology", "rogue_devices", "usb_chunk_limit"}
    if not isinstance(data, dict) or set(data) - known:
        raise UsageError(f"config keys must be among {sorted(known)}")
    if "topology" in data:
        data["topology"] = str((path.parent / data["topology"]).resolve())
    return data


def _print_report(report: BootReport, args) -> None:
    for line in report.diagnostics:
        print(line, file=sys.stderr)
    if not args.quiet:
        for e in report.events:
            print(f"{e.sequence_no:3d}  {e.phase.value:<10} {e.kind.value:<17} {e.subject:<13} "
                  f"{str(e.outcome):<17} {e.detail}")
    print(report.summary_text())
    if args.log:
        args.log.write_text(report.serialize())


def _cmd_provision(args) -> int:
    material = provision_platform(args.seed, _topology(args))
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "code.bin").write_bytes(material.flash.code_section)
    (out / "variables.yaml").write_text(serialize_store(material.store))
    (out / "topology.yaml").write_text(dump_topology(material.topology))
    from .crypto import export_material
    blobs = {"pk": material.platform_identity.anchors.pk.to_blob(),
             "kek": material.platform_identity.anchors.kek.to_blob(),
             "pk_private": material.platform_identity.pk_key.private_key,
             "requester_chain": material.requester.blob,
             "tpm_chain": material.tpm_identity.blob}
    for device_id, ident in material.device_identities.items():
        blobs[f"device_{device_id}_chain"] = ident.blob
    export_material(out / "material", blobs)
    print(f"provisioned {len(material.store)} variables into {out}")
    return 0


def _boot(args, scenario_id: int, extra: dict) -> int:
    topology = _topology(args)
    if extra.get("topology"):
        topology = load_topology(extra["topology"])
    cfg = ScenarioConfig(scenario_id, seed=extra.get("seed", args.seed), topology=topology,
                         spdm_enabled=extra.get("spdm_enabled", True) and not args.no_spdm,
                         rogue_devices=tuple(extra.get("rogue_devices", ())),
                         usb_chunk_limit=int(extra.get("usb_chunk_limit", 64)))
    report = run_scenario(cfg)
    _print_report(report, args)
    return EXIT_STATUS[report.result]


def _cmd_report(args) -> int:
    if args.runs < 1:
        raise UsageError("--runs must be at least 1")
    report = overhead_report(args.runs, seed=args.seed, topology=_topology(args), threshold=args.threshold)
    print(f"scenario 1, {args.runs} runs per mode, |z| > {args.threshold:g} removed")
    print(report.to_text())
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "provision":
            return _cmd_provision(args)
        if args.command == "run":
            extra = _load_run_config(args.config)
            return _boot(args, int(extra.get("scenario", 1)), extra)
        if args.command == "scenario":
            return _boot(args, args.scenario_id, {})
        return _cmd_report(args)
    except (UsageError, UnknownScenario) as exc:
        print(f"spdm-boot: {exc}", file=sys.stderr)
        return EX_USAGE
    except (ConfigurationError, ValueError, OSError) as exc:
        print(f"spdm-boot: configuration error: {exc}", file=sys.stderr)
        return EX_CONFIG
