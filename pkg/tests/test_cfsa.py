from __future__ import annotations

import pytest

from agent_helpers import CORRECT, Override, check_cfsa_budgets, check_routing, need_more, tagged
from emrprep.bench.cohort import build_gold_cohort
from emrprep.bench.metrics import evaluate_cohort
from emrprep.bench.scenarios import (
    ADVERSARY_MODES,
    AdversaryResponder,
    ReferenceResponder,
    scenario_by_name,
    standard_scenarios,
)
from emrprep.cfsa import (
    T_DATA,
    T_ERROR,
    T_GENERATE,
    T_LINK_FEATURE,
    T_LINK_MAPPING,
    T_SUFFICIENCY,
    T_UPDATE,
    CfsaAgent,
    CfsaState,
    ClinicalRequest,
)
from emrprep.db import Correct, EmptyOutput, ExecutionError, QueryResult, classify_result
from emrprep.llm import LLMClient, ScriptedBackend
from emrprep.parsing import ErrorClass
from emrprep.runlog import AgentFailure, Budgets, Transcript
from emrprep.templates import DocumentBundle


def make_agent(env, script=None, responder=None, documents=None, budgets=None):
    base = responder or ReferenceResponder(env.fixture)
    override = Override(base, script or {})
    agent = CfsaAgent(LLMClient(ScriptedBackend(override)), env.session, env.snapshot,
                      documents if documents is not None else env.fixture.documents, budgets, Transcript())
    return agent, override


def linked_state(agent, env, scenario="age_gender"):
    state = CfsaState(scenario_by_name(env.fixture, scenario).request)
    agent.link_schema(state)
    return state


# -- requests ----------------------------------------------------------------------


def test_request_validation():
    r = ClinicalRequest("Include only Age 19 to 29 and Include only Male", "ICU-stay id, gender (Male/Female/Unknown)")
    assert r.spec.feature_count == 2
    assert ClinicalRequest.from_json(r.to_json()) == r
    with pytest.raises(ValueError):
        ClinicalRequest(" ", "ICU-stay id")
    with pytest.raises(ValueError):
        ClinicalRequest("x", "ICU-stay id, height (cm)")


# -- schema linking ------------------------------------------------------------------


def test_link_schema_gender_request(mimic):
    agent, _ = make_agent(mimic)
    state = linked_state(agent, mimic)
    assert {"patients", "icustays"} <= set(state.feature_schema.table_names())
    assert "intime" in state.feature_schema.table("icustays").column_names()
    assert "gender" in state.feature_schema.table("patients").column_names()
    assert state.guideline


def test_mapping_partition_excludes_measurements(mimic):
    agent, _ = make_agent(mimic)
    state = linked_state(agent, mimic, "min_records")
    assert "d_labitems" in state.mapping_schema.table_names()
    assert not {"labevents", "chartevents"} & set(state.mapping_schema.table_names())
    assert "labevents" in state.feature_schema.table_names()


def test_empty_documents_render_and_run(sic):
    agent, override = make_agent(sic, documents=DocumentBundle())
    result = agent.run(scenario_by_name(sic.fixture, "age_gender").request)
    assert isinstance(classify_result(QueryResult(result.columns, result.rows), result.spec), Correct)
    prompt = override.prompts(T_LINK_FEATURE)[0]
    assert "{Database_Manual}" not in prompt and sic.fixture.documents.database_manual[:40] not in prompt


def test_link_feedback_appended(eicu):
    agent, override = make_agent(eicu)
    state = CfsaState(scenario_by_name(eicu.fixture, "age_gender").request)
    agent.link_schema(state, feedback="no such column: sex")
    assert all("no such column: sex" in p for p in override.prompts(T_LINK_MAPPING) + override.prompts(T_LINK_FEATURE))


def test_link_malformed_twice_fails(eicu):
    agent, _ = make_agent(eicu, {T_LINK_MAPPING: ["nothing useful", "still nothing"]})
    with pytest.raises(AgentFailure) as err:
        agent.run(scenario_by_name(eicu.fixture, "age_gender").request)
    assert err.value.phase == "link_schema"
    assert err.value.transcript.of("terminal_failure")


# -- sufficiency -----------------------------------------------------------------------


def test_assess_correct(sic):
    agent, _ = make_agent(sic, {T_SUFFICIENCY: [CORRECT]})
    assert agent.assess_sufficiency(linked_state(agent, sic)).correct


def test_assess_two_queries_schedule_round(sic):
    q = ["SELECT DISTINCT sex FROM cases", "SELECT COUNT(*) FROM cases"]
    agent, _ = make_agent(sic, {T_SUFFICIENCY: [need_more(*q)]})
    state = linked_state(agent, sic)
    verdict = agent.assess_sufficiency(state)
    assert not verdict.correct and list(verdict.queries) == q
    rnd = agent.run_observation_round(state, verdict.queries)
    assert rnd.queries == tuple(q) and len(rnd.results) == 2 and state.rounds_used == 1


def test_assess_over_budget_retries_then_trims(sic):
    six = [f"SELECT {i}" for i in range(6)]
    agent, override = make_agent(sic, {T_SUFFICIENCY: [need_more(*six), need_more(*six)]})
    state = linked_state(agent, sic)
    verdict = agent.assess_sufficiency(state)
    assert list(verdict.queries) == six[:5]
    prompts = override.prompts(T_SUFFICIENCY)
    assert len(prompts) == 2 and "list at most 5" in prompts[1] and "list at most" not in prompts[0]
    assert [e["attempt"] for e in agent.transcript.of("budget_violation")] == [1, 2]


def test_assess_over_budget_once_then_compliant(sic):
    agent, _ = make_agent(sic, {T_SUFFICIENCY: [need_more(*[f"SELECT {i}" for i in range(7)]),
                                                need_more("SELECT 1", "SELECT 2")]})
    assert agent.assess_sufficiency(linked_state(agent, sic)).queries == ("SELECT 1", "SELECT 2")


def test_assess_drops_duplicate_probes(sic):
    agent, _ = make_agent(sic, {T_SUFFICIENCY: [need_more("SELECT 1 AS a"), need_more("select  1 as A", "SELECT 2")]})
    state = linked_state(agent, sic)
    agent.run_observation_round(state, agent.assess_sufficiency(state).queries)
    verdict = agent.assess_sufficiency(state)
    assert verdict.queries == ("SELECT 2",)
    assert agent.transcript.of("verdict")[-1]["duplicates_dropped"] == 1


# -- observation rounds -------------------------------------------------------------


def test_observation_reveals_male_code(sic):
    agent, _ = make_agent(sic)
    state = linked_state(agent, sic)
    rnd = agent.run_observation_round(state, ["SELECT DISTINCT sex FROM cases ORDER BY sex"])
    assert (23,) in rnd.results[0].rows and rnd.temperature == 0.0


def test_all_probes_fail(sic):
    agent, _ = make_agent(sic)
    state = linked_state(agent, sic)
    rnd = agent.run_observation_round(state, [f"SELECT x FROM missing_{i}" for i in range(5)])
    assert all(isinstance(r, ExecutionError) and "no such table" in r.message for r in rnd.results)
    with pytest.raises(ValueError):
        agent.run_observation_round(state, [f"SELECT {i}" for i in range(6)])
    with pytest.raises(ValueError):
        agent.run_observation_round(state, [])


def test_parallel_probes_same_results(sic):
    q = ["SELECT DISTINCT sex FROM cases ORDER BY sex", "SELECT COUNT(*) FROM laboratory", "SELECT bad FROM nowhere"]
    serial, _ = make_agent(sic)
    s1 = linked_state(serial, sic)
    parallel = CfsaAgent(serial.client, sic.session, sic.snapshot, parallel_probes=True)
    s2 = CfsaState(s1.request)
    assert serial.run_observation_round(s1, q).results == parallel.run_observation_round(s2, q).results


def test_round_six_runs_at_point_one(eicu):
    probes = [need_more(f"SELECT {k} AS probe") for k in range(1, 11)]
    agent, override = make_agent(eicu, {T_SUFFICIENCY: probes, T_DATA: [tagged("output", "<No info>")] * 10})
    agent.run(scenario_by_name(eicu.fixture, "age_gender").request)
    by_round = {r.round_index: r.temperature for r in override.requests if r.template_id == T_SUFFICIENCY}
    assert by_round[6] == 0.1 and by_round[5] == 0.0 and by_round[10] == 0.5
    data_temps = {r.round_index: r.temperature for r in override.requests if r.template_id == T_DATA}
    assert data_temps[6] == 0.1


# -- data sufficiency and schema update ----------------------------------------------


def test_add_info_mentions_code_and_updates_guideline(sic):
    add = tagged("output", "<Add info>") + "\n" + tagged("Add info", "Sex code 23 means Male and 24 Female.")
    agent, _ = make_agent(sic, {T_DATA: [add]})
    state = linked_state(agent, sic)
    rnd = agent.run_observation_round(state, ["SELECT DISTINCT sex FROM cases"])
    kind, gained = agent.check_data_sufficiency(state, rnd)
    assert kind == "Add info" and "23" in gained
    assert state.observations[-1].verdict == "Add info"
    agent.update_schema(state, gained)
    assert "23 means Male" in state.guideline
    updated = agent.transcript.of("schema_updated")[-1]
    assert updated["kept_previous"] is False
    assert agent.transcript.of("update")[-1]["previous_guideline"] != state.guideline


def test_no_info_keeps_schema(sic):
    agent, _ = make_agent(sic, {T_DATA: [tagged("output", "<No info>")]})
    state = linked_state(agent, sic)
    before = (state.mapping_schema, state.feature_schema, state.guideline)
    rnd = agent.run_observation_round(state, ["SELECT 1"])
    assert agent.check_data_sufficiency(state, rnd) == ("No info", "")
    assert (state.mapping_schema, state.feature_schema, state.guideline) == before


def test_data_malformed_twice_falls_back(sic):
    agent, override = make_agent(sic, {T_DATA: ["garbage", "<output>maybe</output>"]})
    state = linked_state(agent, sic)
    rnd = agent.run_observation_round(state, ["SELECT 1"])
    assert agent.check_data_sufficiency(state, rnd) == ("No info", "")
    assert len(override.prompts(T_DATA)) == 2


def test_update_adds_value_examples(sic):
    edited = (tagged("edited schema guideline", "Use sex codes 23/24.") + "\n"
              + tagged("edited schema", "Table Name: sicdb.cases , Column: sex,\nValues: [23, 24]"))
    agent, _ = make_agent(sic, {T_UPDATE: [edited]})
    state = linked_state(agent, sic)
    mapping_before = state.mapping_schema
    agent.update_schema(state, "Sex codes are 23 and 24.")
    assert state.feature_schema.table("cases").columns[0].values == ("23", "24")
    assert state.mapping_schema == mapping_before
    with pytest.raises(ValueError):
        agent.update_schema(state, "  ")


def test_update_no_change_is_identity(sic):
    agent, _ = make_agent(sic)
    state = linked_state(agent, sic)
    from emrprep.parsing import MAPPING_LABEL, FEATURE_LABEL, serialize_linked_schema
    same = (tagged("edited schema guideline", state.guideline) + "\n"
            + tagged("edited schema", serialize_linked_schema(state.mapping_schema, MAPPING_LABEL) + "\n"
                     + serialize_linked_schema(state.feature_schema, FEATURE_LABEL)))
    agent2, _ = make_agent(sic, {T_UPDATE: [same]})
    before = (state.mapping_schema, state.feature_schema, state.guideline)
    agent2.update_schema(state, "nothing new")
    assert (state.mapping_schema, state.feature_schema, state.guideline) == before


def test_update_malformed_keeps_previous(sic):
    agent, _ = make_agent(sic, {T_UPDATE: ["no sections"]})
    state = linked_state(agent, sic)
    before = (state.mapping_schema, state.feature_schema, state.guideline)
    agent.update_schema(state, "x")
    assert (state.mapping_schema, state.feature_schema, state.guideline) == before
    assert agent.transcript.of("schema_updated")[-1]["kept_previous"] is True


# -- generation and routing ------------------------------------------------------


def test_los_request_rounds_to_four_decimals(env):
    agent, _ = make_agent(env)
    result = agent.run(scenario_by_name(env.fixture, "min_duration").request)
    assert "4)" in result.final_sql.replace(" ", "")
    assert all(round(float(r[3]), 4) == float(r[3]) for r in result.rows)


def test_syntax_error_regenerates_without_relinking(sic):
    agent, override = make_agent(sic, {T_GENERATE: [tagged("SQL query", "SELEC caseid FRM cases")]})
    result = agent.run(scenario_by_name(sic.fixture, "age_gender").request)
    assert check_routing(agent.transcript) == ["syntax error"]
    assert len(agent.transcript.of("link_schema")) == 1
    assert "SELEC caseid FRM cases" in override.prompts(T_GENERATE)[1]
    assert "SELEC caseid FRM cases" not in override.prompts(T_GENERATE)[0]
    assert result.state.retries_used == 1


def test_missing_column_relinks_with_feedback(sic):
    agent, override = make_agent(sic, {T_GENERATE: [tagged("SQL query", "SELECT caseid, gender FROM cases")]})
    agent.run(scenario_by_name(sic.fixture, "age_gender").request)
    assert check_routing(agent.transcript) == ["wrong schema"]
    assert len(agent.transcript.of("link_schema")) == 2
    assert "no such column: gender" in override.prompts(T_LINK_MAPPING)[1]


def test_empty_result_routes_without_classifier(sic):
    ref = ReferenceResponder(sic.fixture)
    empty = lambda p: ref.cfsa_generate(p).replace("</SQL query>", "").rstrip() \
        .replace("<SQL query>\n", "<SQL query>\nSELECT * FROM (") + ") AS t WHERE 1 = 0\n</SQL query>"
    agent, override = make_agent(sic, {T_GENERATE: [empty]})
    agent.run(scenario_by_name(sic.fixture, "age_gender").request)
    assert override.prompts(T_ERROR) == []
    assert agent.transcript.of("execution")[0]["status"] == "EmptyOutput"
    assert check_routing(agent.transcript) == ["wrong schema"]


def test_generation_without_sql_section_consumes_retry(sic):
    agent, _ = make_agent(sic, {T_GENERATE: ["I would select the male patients."]})
    result = agent.run(scenario_by_name(sic.fixture, "age_gender").request)
    assert result.state.retries_used == 1
    assert agent.transcript.of("retry")[0]["failed_phase"] == "generate_sql"


def test_five_failures_terminate(mimic):
    agent, _ = make_agent(mimic, responder=AdversaryResponder(ReferenceResponder(mimic.fixture), "repeated_failure"))
    with pytest.raises(AgentFailure) as err:
        agent.run(scenario_by_name(mimic.fixture, "age_gender").request)
    assert err.value.budgets_used["retries_used"] == 5
    assert err.value.phase == "execute"
    check_cfsa_budgets(agent.transcript)


def test_perpetual_need_more_forces_generation(eicu):
    agent, _ = make_agent(eicu, responder=AdversaryResponder(ReferenceResponder(eicu.fixture), "perpetual"))
    result = agent.run(scenario_by_name(eicu.fixture, "age_gender").request)
    assert result.state.rounds_used == 10
    forced = agent.transcript.of("forced_generation")
    assert len(forced) == 1 and forced[0]["rounds_used"] == 10
    phases = agent.transcript.phases()
    assert phases.index("forced_generation") < phases.index("generate_sql")
    check_cfsa_budgets(agent.transcript)


def test_relinking_does_not_reset_round_budget(eicu):
    agent, _ = make_agent(eicu, {T_GENERATE: [tagged("SQL query", "SELECT nope FROM patient")]},
                          responder=AdversaryResponder(ReferenceResponder(eicu.fixture), "perpetual"))
    result = agent.run(scenario_by_name(eicu.fixture, "age_gender").request)
    assert result.state.rounds_used == 10
    assert len(agent.transcript.of("link_schema")) == 2
    assert len(agent.transcript.of("forced_generation")) == 2


def test_smaller_budgets_respected(sic):
    budgets = Budgets(max_rounds=2, max_queries_per_round=1, max_retries=2)
    agent, _ = make_agent(sic, responder=AdversaryResponder(ReferenceResponder(sic.fixture), "over_budget"),
                          budgets=budgets)
    agent.run(scenario_by_name(sic.fixture, "age_gender").request)
    check_cfsa_budgets(agent.transcript, 2, 1, 2)


# -- full runs ----------------------------------------------------------------------


@pytest.mark.parametrize("name", ["age_gender", "min_duration", "min_records"])
def test_reference_run_matches_gold(env, name):
    scenario = scenario_by_name(env.fixture, name)
    agent, _ = make_agent(env)
    result = agent.run(scenario.request)
    gold = build_gold_cohort(env.fixture, scenario.criteria, scenario.spec)
    score = evaluate_cohort(result.stay_ids(), gold, result.rows)
    assert score.f1 == 1.0 and score.format_accuracy == 1.0
    assert isinstance(classify_result(QueryResult(result.columns, result.rows), scenario.spec), Correct)
    check_cfsa_budgets(agent.transcript)


@pytest.mark.parametrize("mode", ADVERSARY_MODES)
def test_adversaries_keep_invariants(env, mode):
    for scenario in standard_scenarios(env.fixture):
        agent, _ = make_agent(env, responder=AdversaryResponder(ReferenceResponder(env.fixture), mode))
        try:
            result = agent.run(scenario.request)
        except AgentFailure as exc:
            assert mode == "repeated_failure" and exc.budgets_used["retries_used"] == 5
        else:
            assert mode != "repeated_failure"
            assert isinstance(classify_result(QueryResult(result.columns, result.rows), scenario.spec), Correct)
        check_cfsa_budgets(agent.transcript)
        check_routing(agent.transcript)
        issued = [q for r in agent.transcript.of("observe") for q in r["queries"]]
        normalized = [" ".join(q.lower().split()).rstrip(";") for q in issued]
        assert len(normalized) == len(set(normalized))


def test_cohort_csv_header_order(tmp_path, sic):
    agent, _ = make_agent(sic)
    scenario = scenario_by_name(sic.fixture, "min_records")
    result = agent.run(scenario.request)
    result.to_csv(tmp_path / "c.csv")
    header = (tmp_path / "c.csv").read_text().splitlines()[0]
    assert header == ",".join(scenario.spec.names)


def test_classify_empty_status_type():
    assert isinstance(EmptyOutput(), EmptyOutput)
    assert ErrorClass("syntax error") is ErrorClass.SYNTAX_ERROR
