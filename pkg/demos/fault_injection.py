"""How the cohort agent behaves when the model misbehaves.

Each scripted fault mode wraps the reference answers with one kind of
failure: too many probe queries, a model that is never satisfied, broken
SQL, garbled answers. The summary shows the budgets used and the recovery
route taken.

    python demos/fault_injection.py
"""

from __future__ import annotations

import tempfile
from pathlib import Path

from emrprep.bench.fixtures import build_fixture
from emrprep.bench.scenarios import ADVERSARY_MODES, scenario_by_name
from emrprep.config import RunConfig
from emrprep.llm import LLMClient
from emrprep.workflows import build_backend, open_workspace, run_cohort


def main(style: str = "eicu") -> None:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        fixture = build_fixture(style)
        paths = fixture.write(tmp / "fixture")
        config = RunConfig(db_url=str(paths.database), backend="scripted")
        request = scenario_by_name(fixture, "age_gender").request
        print(f"{'mode':<24} {'status':<7} {'rounds':>6} {'retries':>7} {'forced':>6}  routes")
        for mode in ADVERSARY_MODES:
            ws = open_workspace(config)
            try:
                client = LLMClient(build_backend(config, ws.fixture, adversary=mode))
                outcome = run_cohort(ws, client, request, tmp / mode)
            finally:
                ws.close()
            t = outcome.transcript
            status = "ok" if outcome.failure is None else "failed"
            rounds = len(t.of("observe"))
            routes = ", ".join(e["error_class"] for e in t.of("route")) or "-"
            print(f"{mode:<24} {status:<7} {rounds:>6} {len(t.of('retry')):>7} "
                  f"{len(t.of('forced_generation')):>6}  {routes}")


if __name__ == "__main__":
    main()
