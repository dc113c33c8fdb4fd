"""Walk the cohort agent through the three built-in requests on one fixture.

The scripted reference responder stands in for the model, so the run is
offline and deterministic. Pass a style name (mimic, eicu, sic) to switch
fixtures.

    python demos/cohort_agent.py eicu
"""

from __future__ import annotations

import sys
import tempfile
from pathlib import Path

from emrprep.bench.cohort import build_gold_cohort
from emrprep.bench.fixtures import build_fixture
from emrprep.bench.metrics import evaluate_cohort
from emrprep.bench.scenarios import standard_scenarios
from emrprep.config import RunConfig
from emrprep.llm import LLMClient
from emrprep.workflows import build_backend, open_workspace, run_cohort


def main(style: str = "sic") -> None:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        fixture = build_fixture(style)
        paths = fixture.write(tmp / "fixture")
        print(f"built {fixture.style.value}: {len(fixture.stays)} ICU stays in {len(fixture.tables)} tables")

        config = RunConfig(db_url=str(paths.database), backend="scripted", output_dir=str(tmp / "runs"))
        ws = open_workspace(config)
        client = LLMClient(build_backend(config, ws.fixture))
        try:
            for scenario in standard_scenarios(fixture):
                print(f"\n== {scenario.name}")
                print(scenario.request.cohort_selection)
                outcome = run_cohort(ws, client, scenario.request, tmp / "runs" / scenario.name)
                result = outcome.result
                state = result.state
                print(f"rounds used {state.rounds_used}, retries used {state.retries_used}, "
                      f"{len(outcome.transcript.llm_calls())} model calls")
                print("final SQL:", result.final_sql[:300] + ("..." if len(result.final_sql) > 300 else ""))
                gold = build_gold_cohort(fixture, scenario.criteria, scenario.spec)
                score = evaluate_cohort(result.stay_ids(), gold, result.rows)
                print(f"{len(result.rows)} rows; F1 {score.f1:.3f}, format accuracy {score.format_accuracy:.3f}")
        finally:
            ws.close()


if __name__ == "__main__":
    main(*sys.argv[1:])
