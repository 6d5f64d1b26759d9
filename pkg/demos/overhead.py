"""Compare a protected boot with an unprotected one across many seeded runs.

Outliers beyond two standard deviations are dropped per metric before the
means are compared. Pass a run count as the first argument (default 30).
"""
import sys

from spdm_boot.harness import ScenarioConfig, overhead_report, run_scenario


def main(runs: int) -> None:
    protected = run_scenario(ScenarioConfig(1))
    baseline = run_scenario(ScenarioConfig(1, spdm_enabled=False))
    print("single run, protected:")
    print(protected.summary_text())
    print("\nsingle run, baseline:")
    print(baseline.summary_text())
    print(f"\n{runs} runs per side:")
    print(overhead_report(runs).to_text())


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 30)
