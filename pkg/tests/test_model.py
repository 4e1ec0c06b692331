import json

import pytest
from hypothesis import given, strategies as st

from flowfabric.errors import ValidationFailed
from flowfabric.model import (
    END,
    ActionState,
    ChoiceState,
    FlowDefinition,
    StateFragment,
    ToolSpec,
    canonical_json,
    compose_flow,
    flow_from_doc,
    flow_violations,
    is_path_expression,
    next_state,
    parse_flow_text,
    resolve_parameters,
    validate_flow,
)


def action(name_next=None, end=False, kind="compute", params=None, on_fail=None, result_path=None):
    return ActionState(provider_url="local://compute", action_kind=kind,
                       parameters=params or {}, result_path=result_path or "$.Out",
                       next=name_next, end=end, on_fail=on_fail)


def linear_flow(*names, params=None):
    states = {}
    for i, name in enumerate(names):
        last = i == len(names) - 1
        states[name] = ActionState(provider_url="local://compute", action_kind="compute",
                                   parameters=(params or {}).get(name, {}),
                                   result_path=f"$.{name}",
                                   next=None if last else names[i + 1], end=last)
    return FlowDefinition(title="t", start_at=names[0], states=states)


class TestValidate:
    def test_minimal_single_state_flow_is_valid(self):
        flow = FlowDefinition(title="min", start_at="S",
                              states={"S": action(end=True, kind="transfer")})
        assert validate_flow(flow) is flow

    def test_smallest_cycle_detected(self):
        flow = FlowDefinition(title="cyc", start_at="A", states={
            "A": action("B"), "B": action("A"),
        })
        violations = flow_violations(flow)
        cycles = [v for v in violations if v.code == "CycleDetected"]
        assert len(cycles) == 1
        assert set(cycles[0].path) == {"A", "B"}

    def test_dangling_next_and_bad_start_reported_together(self):
        flow = FlowDefinition(title="bad", start_at="Nope", states={
            "A": action("Missing"),
        })
        codes = {v.code for v in flow_violations(flow)}
        assert "DanglingNext" in codes
        assert "BadStartAt" in codes

    def test_every_violation_reported_not_just_first(self):
        flow = FlowDefinition(title="bad", start_at="Nope", states={
            "A": action("Missing"),
            "B": action("AlsoMissing"),
        })
        dangling = [v for v in flow_violations(flow) if v.code == "DanglingNext"]
        assert len(dangling) == 2

    def test_duplicate_state_name_rejected_at_parse(self):
        text = json.dumps({
            "title": "dup", "start_at": "A",
            "states": {"A": {"type": "action"}},
        }).replace('"A": {"type": "action"}', '"A": {"type": "action"}, "A": {"type": "action"}')
        with pytest.raises(ValidationFailed) as err:
            parse_flow_text(text)
        assert "duplicate" in str(err.value).lower()

    def test_terminal_marking_enforced(self):
        # non-terminal state without next
        flow = FlowDefinition(title="t", start_at="A", states={
            "A": ActionState("local://c", "compute", {}, "$.A", next=None, end=False),
        })
        assert any("lacks next" in v.message for v in flow_violations(flow))
        # both next and end
        flow2 = FlowDefinition(title="t", start_at="A", states={
            "A": ActionState("local://c", "compute", {}, "$.A", next="B", end=True),
            "B": action(end=True),
        })
        assert any("both next and end" in v.message for v in flow_violations(flow2))

    def test_relative_provider_url_rejected(self):
        flow = FlowDefinition(title="t", start_at="A", states={
            "A": ActionState("not-a-url", "compute", {}, "$.A", end=True),
        })
        assert any("not absolute" in v.message for v in flow_violations(flow))

    def test_parameters_must_reference_input_or_ancestors(self):
        flow = FlowDefinition(title="t", start_at="A", states={
            "A": ActionState("local://c", "compute", {"x": "$.B.out"}, "$.A", next="B"),
            "B": ActionState("local://c", "compute", {}, "$.B", end=True),
        })
        assert any("neither run input nor a prior result" in v.message for v in flow_violations(flow))
        ok = FlowDefinition(title="t", start_at="A", states={
            "A": ActionState("local://c", "compute", {"x": "$.input.k"}, "$.A", next="B"),
            "B": ActionState("local://c", "compute", {"y": "$.A.out"}, "$.B", end=True),
        })
        assert flow_violations(ok) == []

    def test_choice_branches_must_exist(self):
        flow = FlowDefinition(title="t", start_at="C", states={
            "C": ChoiceState("$.input.v", "==", True, "Missing", None),
        })
        assert any(v.code == "DanglingNext" for v in flow_violations(flow))


class TestResolve:
    def test_listing_style_source_path_substitution(self):
        template = {"src": "$.input.transfer_source_path"}
        state = {"input": {"transfer_source_path": "/data/a"}}
        assert resolve_parameters(template, state) == {"src": "/data/a"}

    def test_template_without_expressions_returned_verbatim(self):
        template = {"a": 1, "b": ["x", {"c": None}], "d": "plain $ text"}
        assert resolve_parameters(template, {}) == template

    def test_unresolved_path_raises(self):
        with pytest.raises(ValidationFailed) as err:
            resolve_parameters({"x": "$.input.gone"}, {"input": {}})
        assert err.value.code == "UnresolvedPath"

    def test_non_string_values_substituted_whole(self):
        state = {"Step": {"hits": 412, "files": ["a", "b"]}}
        out = resolve_parameters({"h": "$.Step.hits", "f": "$.Step.files"}, state)
        assert out == {"h": 412, "f": ["a", "b"]}

    _docs = st.recursive(
        st.one_of(st.none(), st.booleans(), st.integers(-1000, 1000),
                  st.text(max_size=8)),
        lambda children: st.one_of(
            st.lists(children, max_size=3),
            st.dictionaries(st.text(min_size=1, max_size=6), children, max_size=3)),
        max_leaves=10)

    @given(template=_docs)
    def test_referentially_transparent(self, template):
        state = {"input": {"k": "v"}}
        once = resolve_parameters(template, state)
        twice = resolve_parameters(template, state)
        assert canonical_json(once) == canonical_json(twice)

    def test_path_expression_syntax(self):
        assert is_path_expression("$.input.k")
        assert is_path_expression("$.Step-1.out_file")
        assert not is_path_expression("$input")
        assert not is_path_expression("$.")
        assert not is_path_expression("plain")
        assert not is_path_expression("$.a..b")


class TestNextState:
    def review_flow(self):
        return FlowDefinition(title="review", start_at="Review", states={
            "Review": ActionState("local://review", "review", {}, "$.Review", next="Check"),
            "Check": ChoiceState("$.Review.decision", "==", "approve", "Publish", None),
            "Publish": ActionState("local://search", "search", {}, "$.Publish", end=True),
        })

    def test_positive_review_takes_publish_branch(self):
        flow = self.review_flow()
        state_doc = {"Review": {"decision": "approve"}}
        assert next_state(flow, "Check", "SUCCEEDED", state_doc) == "Publish"

    def test_reject_ends_without_publish(self):
        flow = self.review_flow()
        state_doc = {"Review": {"decision": "reject"}}
        assert next_state(flow, "Check", "SUCCEEDED", state_doc) is END

    def test_failed_without_handler_fails_run(self):
        flow = linear_flow("A", "B")
        with pytest.raises(ValidationFailed) as err:
            next_state(flow, "A", "FAILED", {})
        assert err.value.code == "RunFailed"

    def test_failed_with_handler_goes_to_handler(self):
        flow = FlowDefinition(title="t", start_at="A", states={
            "A": ActionState("local://c", "compute", {}, "$.A", next="B", on_fail="Cleanup"),
            "B": action(end=True),
            "Cleanup": ActionState("local://c", "compute", {}, "$.Cleanup", end=True),
        })
        assert next_state(flow, "A", "FAILED", {}) == "Cleanup"

    @given(n=st.integers(1, 12))
    def test_acyclic_flow_terminates_within_state_count(self, n):
        names = [f"S{i}" for i in range(n)]
        flow = linear_flow(*names)
        validate_flow(flow)
        cursor, hops = flow.start_at, 0
        while cursor is not END:
            cursor = next_state(flow, cursor, "SUCCEEDED", {})
            hops += 1
            assert hops <= len(flow.states)
        assert hops == n


def transfer_tool(label="Transfer"):
    return ToolSpec(
        name=label, action_kind="transfer",
        required_input_keys=("transfer_source_path", "transfer_destination_path"),
        fragments=(StateFragment(label, "transfer", "local://transfer",
                                 {"source_path": "$.input.transfer_source_path",
                                  "destination_path": "$.input.transfer_destination_path"}),),
        input_key_docs={"transfer_source_path": "path on the source collection"})


def compute_tool(label, keys=("compute_endpoint_id",)):
    return ToolSpec(
        name=label, action_kind="compute", required_input_keys=tuple(keys),
        fragments=(StateFragment(label, "compute", "local://compute",
                                 {"endpoint_id": "$.input.compute_endpoint_id"}),))


class TestCompose:
    def test_two_task_chain(self):
        flow = compose_flow([transfer_tool(), compute_tool("DialsStills")])
        assert len(flow.states) == 2
        assert flow.start_at == "Transfer"
        assert flow.states["Transfer"].next == "DialsStills"
        assert flow.states["DialsStills"].end is True

    def test_single_tool_chain(self):
        flow = compose_flow([transfer_tool()])
        assert len(flow.states) == 1
        assert flow.states["Transfer"].end is True

    def test_empty_chain_rejected(self):
        with pytest.raises(ValidationFailed) as err:
            compose_flow([])
        assert err.value.code == "EmptyToolChain"

    def test_input_schema_is_union_of_required_keys(self):
        flow = compose_flow([transfer_tool(), compute_tool("C")])
        assert set(flow.required_input_keys()) == {
            "transfer_source_path", "transfer_destination_path", "compute_endpoint_id"}

    def test_conflicting_input_key_meaning_rejected(self):
        a = ToolSpec(name="A", action_kind="compute", required_input_keys=("k",),
                     fragments=(StateFragment("A", "compute", "local://c", {}),),
                     input_key_docs={"k": "one meaning"})
        b = ToolSpec(name="B", action_kind="compute", required_input_keys=("k",),
                     fragments=(StateFragment("B", "compute", "local://c", {}),),
                     input_key_docs={"k": "another meaning"})
        with pytest.raises(ValidationFailed) as err:
            compose_flow([a, b])
        assert err.value.code == "ConflictingInputKey"

    def test_multi_fragment_tool_expands(self):
        publish = ToolSpec(
            name="Publish", action_kind="search", required_input_keys=(),
            fragments=(
                StateFragment("TransferMeta", "transfer", "local://transfer", {}),
                StateFragment("IngestMeta", "search", "local://search", {}),
            ))
        flow = compose_flow([transfer_tool(), publish])
        assert list(flow.states) == ["Transfer", "TransferMeta", "IngestMeta"]
        assert flow.states["IngestMeta"].end is True

    @given(n=st.integers(1, 8))
    def test_composition_correct_by_construction(self, n):
        tools = [compute_tool(f"Step{i}") for i in range(n)]
        flow = compose_flow(tools)  # raises if validation fails
        assert flow_violations(flow) == []
        assert len(flow.states) == n


class TestCanonical:
    def test_canonical_json_sorted_and_compact(self):
        assert canonical_json({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'
        assert "\n" not in canonical_json({"a": "multi\nline"})

    def test_flow_id_stable_across_key_order(self):
        doc = {"title": "t", "start_at": "A", "input_schema": {},
               "states": {"A": {"type": "action", "provider_url": "local://c",
                                "action_kind": "compute", "parameters": {},
                                "result_path": "$.A", "end": True}}}
        f1 = flow_from_doc(json.loads(json.dumps(doc)))
        shuffled = {"states": doc["states"], "start_at": "A", "title": "t", "input_schema": {}}
        f2 = flow_from_doc(shuffled)
        assert f1.flow_id == f2.flow_id

    def test_roundtrip_through_doc(self):
        flow = linear_flow("A", "B", "C")
        again = flow_from_doc(flow.to_doc())
        assert again.flow_id == flow.flow_id
        assert again.states["B"].next == "C"
