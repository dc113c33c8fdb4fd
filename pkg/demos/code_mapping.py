"""Map a handful of features on every fixture style and score the result.

Each style stores the same measurements differently: item codes in a
dictionary table, bare names in a long table, or dedicated columns. The
mapping agent reports which of those it found.

    python demos/code_mapping.py
"""

from __future__ import annotations

import tempfile
from pathlib import Path

from emrprep.bench.catalog import Style
from emrprep.bench.fixtures import build_fixture
from emrprep.bench.metrics import evaluate_mapping
from emrprep.config import RunConfig
from emrprep.llm import LLMClient
from emrprep.mapping import MappingGold
from emrprep.workflows import build_backend, open_workspace, run_mapping

FEATURES = ["Heart rate", "Glucose", "Core body temperature", "Lactate", "Procalcitonin"]


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        for style in Style:
            fixture = build_fixture(style)
            paths = fixture.write(tmp / style.value)
            config = RunConfig(db_url=str(paths.database), backend="scripted")
            ws = open_workspace(config)
            try:
                outcome = run_mapping(ws, LLMClient(build_backend(config, ws.fixture)), FEATURES,
                                      tmp / "runs" / style.value)
            finally:
                ws.close()
            print(f"\n== {style.value}")
            for feature, result in outcome.results.items():
                shown = sorted(result.items())[:4]
                print(f"  {feature:<24} {result.outcome.value:<11} {', '.join(shown)}")
            full = fixture.mapping_gold()
            gold = MappingGold({f: full.features[f] for f in FEATURES}, full.universe)
            score = evaluate_mapping(outcome.results, gold)
            print(f"  F1 {score.f1:.3f}, balanced accuracy {score.balanced_accuracy:.3f}")


if __name__ == "__main__":
    main()
