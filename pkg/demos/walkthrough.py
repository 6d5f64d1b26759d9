"""Boot the virtual platform once per scenario and narrate what happened.

Run with ``python3 demos/walkthrough.py``.
"""
from spdm_boot.harness import SCENARIO_TAMPERS, ScenarioConfig, run_scenario


def main() -> None:
    for sid in sorted(SCENARIO_TAMPERS):
        report = run_scenario(ScenarioConfig(sid))
        tamper = SCENARIO_TAMPERS[sid]
        print(f"=== scenario {sid}: {tamper.description or 'genuine platform'}")
        for event in report.events:
            print(f"  {event.sequence_no:3d} {event.phase.value:<11} {event.kind.value:<18} "
                  f"{event.subject:<14} {event.outcome}")
        for line in report.diagnostics:
            print(f"  ! {line}")
        print(f"  -> {report.result.value} (exit status {report.exit_status})\n")


if __name__ == "__main__":
    main()
