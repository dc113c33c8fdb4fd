"""Regenerate the replay cassettes under tests/data/cassettes.

Run from the repository root: ``python tests/data/record_cassettes.py``.
The scripted reference responder stands in for the model; pass
``--backend live`` (with a config naming the endpoint) to record a real one.
"""

from __future__ import annotations

import argparse
import tempfile
from pathlib import Path

from emrprep.bench.catalog import Style
from emrprep.bench.fixtures import build_fixture
from emrprep.bench.scenarios import ADVERSARY_MODES, CMA_ADVERSARY_MODES
from emrprep.cli import main

HERE = Path(__file__).parent / "cassettes"
PIPELINE_FEATURES = ("Heart rate", "Glucose", "Respiratory rate")
PIPELINE_RANGES = ("0:1440", "-10000:100000", "100000:200000")
CMA_ADVERSARY_FEATURES = ("Heart rate", "Glucose", "Lactate")


def record(db: Path, cassette: Path, out: Path, *extra: str, backend: str = "scripted",
           config: str | None = None) -> None:
    argv = ["record", "--backend", backend, "--db-url", str(db), "--cassette", str(cassette),
            "--out", str(out), "--overwrite", *extra]
    if config:
        argv += ["--config", config]
    code = main(argv)
    if code not in (0, 1):
        raise SystemExit(f"recording {cassette.name} failed with exit code {code}")
    print(f"{cassette.name}: exit {code}")


def main_record() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--backend", default="scripted", choices=("scripted", "live"))
    parser.add_argument("--config")
    args = parser.parse_args()
    HERE.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        feature_file = tmp / "pipeline_features.txt"
        feature_file.write_text("\n".join(PIPELINE_FEATURES) + "\n", encoding="utf-8")
        adv_file = tmp / "adversary_features.txt"
        adv_file.write_text("\n".join(CMA_ADVERSARY_FEATURES) + "\n", encoding="utf-8")
        for style in Style:
            stem = style.value.lower()
            paths = build_fixture(style).write(tmp / stem)
            db, out = paths.database, tmp / "runs" / stem
            kw = dict(backend=args.backend, config=args.config)
            record(db, HERE / f"cfsa_{stem}.jsonl", out / "cfsa", "--task", "cfsa", **kw)
            record(db, HERE / f"cma_{stem}.jsonl", out / "cma", "--task", "cma", **kw)
            pipeline = ["--task", "pipeline", "--scenario", "age_gender", "--features", str(feature_file)]
            for r in PIPELINE_RANGES:
                pipeline.append(f"--range={r}")
            record(db, HERE / f"pipeline_{stem}.jsonl", out / "pipeline", *pipeline, **kw)
            if args.backend != "scripted":
                continue
            for mode in ADVERSARY_MODES:
                record(db, HERE / f"adversary_{mode}_{stem}.jsonl", out / "adv" / mode,
                       "--task", "cfsa", "--adversary", mode)
            for mode in CMA_ADVERSARY_MODES:
                record(db, HERE / f"cma_adversary_{mode}_{stem}.jsonl", out / "cma_adv" / mode,
                       "--task", "cma", "--features", str(adv_file), "--adversary", mode)


if __name__ == "__main__":
    main_record()
