"""From a clinical request to an event stream in one go.

The cohort agent selects stays, the mapping agent finds the codes for three
features, and the integration step joins them into
``(stay_id, timestamp_offset, event_type, value)`` rows for the first day.

    python demos/event_stream.py mimic
"""

from __future__ import annotations

import sys
import tempfile
from collections import Counter
from pathlib import Path

from emrprep.bench.fixtures import build_fixture
from emrprep.bench.scenarios import scenario_by_name
from emrprep.config import RunConfig
from emrprep.integrate import CohortArtifacts, TimeRange
from emrprep.llm import LLMClient
from emrprep.workflows import build_backend, open_workspace, run_cohort, run_integration, run_mapping

FEATURES = ["Heart rate", "Glucose", "Respiratory rate"]


def main(style: str = "mimic") -> None:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        fixture = build_fixture(style)
        paths = fixture.write(tmp / "fixture")
        config = RunConfig(db_url=str(paths.database), backend="scripted")
        ws = open_workspace(config)
        try:
            client = LLMClient(build_backend(config, ws.fixture))
            request = scenario_by_name(fixture, "age_gender").request
            print(request.cohort_selection)
            cohort = run_cohort(ws, client, request, tmp / "cfsa")
            print(f"cohort: {len(cohort.result.rows)} stays")
            mapped = run_mapping(ws, client, FEATURES, tmp / "cma")
            for f, r in mapped.results.items():
                print(f"  {f}: {r.outcome.value} {sorted(r.items())}")
            window = TimeRange(0, 1440)
            rows, files = run_integration(ws, client, CohortArtifacts.from_result(cohort.result), mapped.results,
                                          mapped.linking, FEATURES, window, tmp / "stream")
        finally:
            ws.close()
        print(f"\n{len(rows)} events within {window.render()}")
        for kind, n in sorted(Counter(r.event_type for r in rows).items()):
            print(f"  {kind}: {n}")
        print("first rows:")
        print("  " + files[0].read_text(encoding="utf-8").splitlines()[0])
        for r in rows[:5]:
            print(f"  {r.stay_id},{r.timestamp_offset},{r.event_type},{r.value}")


if __name__ == "__main__":
    main(*sys.argv[1:])
