from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import pytest

from emrprep.bench.catalog import Style
from emrprep.bench.fixtures import Fixture, FixturePaths, build_fixture
from emrprep.bench.scenarios import ReferenceResponder
from emrprep.db import SchemaSnapshot, Session, connect, introspect_schema
from emrprep.llm import Cassette, LLMClient, ReplayBackend, ScriptedBackend

DATA = Path(__file__).parent / "data"
CASSETTES = DATA / "cassettes"


@dataclass
class Env:
    """One built fixture with an open read-only session."""

    style: Style
    fixture: Fixture
    paths: FixturePaths
    session: Session
    snapshot: SchemaSnapshot

    @property
    def stem(self) -> str:
        return self.style.value.lower()

    def scripted(self, responder=None) -> LLMClient:
        return LLMClient(ScriptedBackend(responder or ReferenceResponder(self.fixture)))

    def replay(self, name: str) -> LLMClient:
        return LLMClient(ReplayBackend(Cassette.load(CASSETTES / f"{name}_{self.stem}.jsonl")))


@pytest.fixture(scope="session")
def envs(tmp_path_factory) -> dict[Style, Env]:
    root = tmp_path_factory.mktemp("fixtures")
    out = {}
    for style in Style:
        fx = build_fixture(style)
        paths = fx.write(root / style.value.lower())
        session = connect(paths.database)
        out[style] = Env(style, fx, paths, session, introspect_schema(session, 10))
    yield out
    for env in out.values():
        env.session.close()


@pytest.fixture(scope="session")
def mimic(envs) -> Env:
    return envs[Style.MIMIC_LIKE]


@pytest.fixture(scope="session")
def eicu(envs) -> Env:
    return envs[Style.EICU_LIKE]


@pytest.fixture(scope="session")
def sic(envs) -> Env:
    return envs[Style.SIC_LIKE]


@pytest.fixture(params=list(Style), ids=lambda s: s.value)
def env(request, envs) -> Env:
    return envs[request.param]
