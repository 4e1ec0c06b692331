"""Flow documents: definition, validation, composition, and templating.

A flow is a JSON document describing an acyclic graph of action states
(each handled by an action provider) and choice states (conditional
branches). Parameter templates use dotted path expressions rooted at
``$`` that resolve against the run state document, e.g.
``$.input.transfer_source_path`` or ``$.StillsResult.hits``.

Values here are immutable after validation and safe to share across
threads.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterator

from .errors import ValidationFailed

END = None  # sentinel transition target: run terminates

ACTION_KINDS = ("transfer", "compute", "search", "review")

_PATH_RE = re.compile(r"^\$(\.[A-Za-z0-9_][A-Za-z0-9_-]*)+$")
_NAME_RE = re.compile(r"^[A-Za-z0-9_][A-Za-z0-9_-]*$")


def is_path_expression(value: Any) -> bool:
    return isinstance(value, str) and value.startswith("$.") and _PATH_RE.match(value) is not None


def split_path(expr: str) -> list[str]:
    """'$.a.b-c.d' -> ['a', 'b-c', 'd']."""
    if not is_path_expression(expr):
        raise ValidationFailed(f"not a path expression: {expr!r}")
    return expr[2:].split(".")


def lookup_path(doc: Any, expr: str) -> Any:
    """Resolve a path expression against a document. KeyError if absent."""
    node = doc
    for seg in split_path(expr):
        if not isinstance(node, dict) or seg not in node:
            raise KeyError(expr)
        node = node[seg]
    return node


def set_path(doc: dict[str, Any], expr: str, value: Any) -> None:
    """Store value at a path expression, creating intermediate objects."""
    segs = split_path(expr)
    node = doc
    for seg in segs[:-1]:
        node = node.setdefault(seg, {})
        if not isinstance(node, dict):
            raise ValidationFailed(f"path {expr} crosses a non-object value")
    node[segs[-1]] = value


def iter_template_paths(template: Any) -> Iterator[str]:
    """Yield every path expression appearing in a template document."""
    if isinstance(template, str):
        if is_path_expression(template):
            yield template
    elif isinstance(template, dict):
        for v in template.values():
            yield from iter_template_paths(v)
    elif isinstance(template, list):
        for v in template:
            yield from iter_template_paths(v)


class UnresolvedPath(ValidationFailed):
    code = "UnresolvedPath"


def resolve_parameters(template: Any, run_state: dict[str, Any]) -> Any:
    """Substitute every path expression in ``template`` with its value.

    Pure and deterministic: a template string that is exactly a path
    expression is replaced by the referenced value (which may be any
    JSON type); everything else is copied verbatim.
    """
    if isinstance(template, str):
        if is_path_expression(template):
            try:
                return lookup_path(run_state, template)
            except KeyError:
                raise UnresolvedPath(f"unresolved path {template}", detail={"path": template}) from None
        return template
    if isinstance(template, dict):
        return {k: resolve_parameters(v, run_state) for k, v in template.items()}
    if isinstance(template, list):
        return [resolve_parameters(v, run_state) for v in template]
    return template


def canonical_json(doc: Any) -> str:
    """Canonical serialization: sorted keys, UTF-8, no whitespace/newlines."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def content_id(prefix: str, doc: Any) -> str:
    digest = hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()
    return f"{prefix}-{digest[:16]}"


@dataclass(frozen=True)
class ActionState:
    provider_url: str
    action_kind: str
    parameters: dict[str, Any]
    result_path: str
    next: str | None = END  # END iff end is True
    end: bool = False
    on_fail: str | None = None

    def to_doc(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "type": "action",
            "provider_url": self.provider_url,
            "action_kind": self.action_kind,
            "parameters": self.parameters,
            "result_path": self.result_path,
        }
        if self.end:
            doc["end"] = True
        else:
            doc["next"] = self.next
        if self.on_fail:
            doc["on_fail"] = self.on_fail
        return doc


@dataclass(frozen=True)
class ChoiceState:
    condition_path: str
    comparator: str  # "==" or "!="
    literal: Any
    if_true: str | None  # state name, or END
    if_false: str | None

    def to_doc(self) -> dict[str, Any]:
        return {
            "type": "choice",
            "condition": {"path": self.condition_path, "comparator": self.comparator, "literal": self.literal},
            "if_true": self.if_true,
            "if_false": self.if_false,
        }

    def evaluate(self, run_state: dict[str, Any]) -> bool:
        try:
            value = lookup_path(run_state, self.condition_path)
        except KeyError:
            raise UnresolvedPath(f"choice condition path {self.condition_path} not in run state") from None
        if self.comparator == "==":
            return value == self.literal
        if self.comparator == "!=":
            return value != self.literal
        raise ValidationFailed(f"unsupported comparator {self.comparator!r}")


State = ActionState | ChoiceState


@dataclass(frozen=True)
class FlowDefinition:
    title: str
    start_at: str
    states: dict[str, State]
    input_schema: dict[str, Any] = field(default_factory=dict)

    def to_doc(self) -> dict[str, Any]:
        return {
            "title": self.title,
            "start_at": self.start_at,
            "input_schema": self.input_schema,
            "states": {name: st.to_doc() for name, st in self.states.items()},
        }

    @property
    def flow_id(self) -> str:
        return content_id("flow", self.to_doc())

    def required_input_keys(self) -> list[str]:
        return list(self.input_schema.get("required", []))

    def action_states(self) -> dict[str, ActionState]:
        return {n: s for n, s in self.states.items() if isinstance(s, ActionState)}


def flow_from_doc(doc: dict[str, Any]) -> FlowDefinition:
    """Parse a flow document. Structural errors raise ValidationFailed;
    graph-level problems are reported by validate_flow."""
    if not isinstance(doc, dict):
        raise ValidationFailed("flow document must be an object")
    states_doc = doc.get("states")
    if not isinstance(states_doc, dict) or not states_doc:
        raise ValidationFailed("flow document needs a non-empty 'states' object")
    states: dict[str, State] = {}
    for name, body in states_doc.items():
        if not isinstance(body, dict):
            raise ValidationFailed(f"state {name!r} must be an object")
        kind = body.get("type", "action")
        if kind == "action":
            states[name] = ActionState(
                provider_url=body.get("provider_url", ""),
                action_kind=body.get("action_kind", ""),
                parameters=body.get("parameters", {}),
                result_path=body.get("result_path", f"$.{name}"),
                next=body.get("next"),
                end=bool(body.get("end", False)),
                on_fail=body.get("on_fail"),
            )
        elif kind == "choice":
            cond = body.get("condition", {})
            states[name] = ChoiceState(
                condition_path=cond.get("path", ""),
                comparator=cond.get("comparator", "=="),
                literal=cond.get("literal"),
                if_true=body.get("if_true"),
                if_false=body.get("if_false"),
            )
        else:
            raise ValidationFailed(f"state {name!r} has unknown type {kind!r}")
    return FlowDefinition(
        title=doc.get("title", ""),
        start_at=doc.get("start_at", ""),
        states=states,
        input_schema=doc.get("input_schema", {}),
    )


def parse_flow_text(text: str) -> FlowDefinition:
    """Parse flow JSON, rejecting duplicate state names (which plain
    json.loads would silently collapse)."""

    def hook(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
        seen: dict[str, Any] = {}
        for k, v in pairs:
            if k in seen:
                raise ValidationFailed(f"duplicate key {k!r} in document", detail={"name": k, "code": "DuplicateState"})
            seen[k] = v
        return seen

    try:
        doc = json.loads(text, object_pairs_hook=hook)
    except json.JSONDecodeError as exc:
        raise ValidationFailed(f"flow document is not valid JSON: {exc}") from None
    return flow_from_doc(doc)


@dataclass(frozen=True)
class FlowViolation:
    code: str  # DanglingNext | CycleDetected | DuplicateState | BadStartAt | BadState
    state: str | None
    message: str
    path: tuple[str, ...] = ()


def _out_edges(state: State) -> list[str]:
    edges = []
    if isinstance(state, ActionState):
        if state.next is not END:
            edges.append(state.next)
        if state.on_fail:
            edges.append(state.on_fail)
    else:
        if state.if_true is not END:
            edges.append(state.if_true)
        if state.if_false is not END:
            edges.append(state.if_false)
    return edges


def flow_violations(flow: FlowDefinition) -> list[FlowViolation]:
    """Collect every invariant violation (not just the first)."""
    out: list[FlowViolation] = []
    names = set(flow.states)

    for name in flow.states:
        if not name or not _NAME_RE.match(name):
            out.append(FlowViolation("BadState", name, f"state name {name!r} is empty or malformed"))

    if flow.start_at not in names:
        out.append(FlowViolation("BadStartAt", flow.start_at, f"start_at {flow.start_at!r} names no state"))

    for name, st in flow.states.items():
        for target in _out_edges(st):
            if target not in names:
                out.append(FlowViolation("DanglingNext", name, f"state {name!r} references unknown state {target!r}"))
        if isinstance(st, ActionState):
            if st.end and st.next is not END:
                out.append(FlowViolation("BadState", name, f"state {name!r} carries both next and end"))
            if not st.end and st.next is END:
                out.append(FlowViolation("BadState", name, f"non-terminal state {name!r} lacks next (missing end=true?)"))
            if "://" not in st.provider_url:
                out.append(FlowViolation("BadState", name, f"state {name!r} provider_url {st.provider_url!r} is not absolute"))
            if not is_path_expression(st.result_path):
                out.append(FlowViolation("BadState", name, f"state {name!r} result_path {st.result_path!r} is not a path expression"))
            if st.action_kind not in ACTION_KINDS:
                out.append(FlowViolation("BadState", name, f"state {name!r} action_kind {st.action_kind!r} unknown"))
        else:
            if not is_path_expression(st.condition_path):
                out.append(FlowViolation("BadState", name, f"choice {name!r} condition path {st.condition_path!r} invalid"))
            if st.comparator not in ("==", "!="):
                out.append(FlowViolation("BadState", name, f"choice {name!r} comparator {st.comparator!r} unsupported"))

    # Cycle detection over states that resolved; dangling edges already reported.
    color: dict[str, int] = {}  # 0 unvisited, 1 on stack, 2 done
    stack_path: list[str] = []

    def visit(node: str) -> tuple[str, ...] | None:
        color[node] = 1
        stack_path.append(node)
        for nxt in _out_edges(flow.states[node]):
            if nxt not in names:
                continue
            c = color.get(nxt, 0)
            if c == 1:
                return tuple(stack_path[stack_path.index(nxt):])
            if c == 0:
                cyc = visit(nxt)
                if cyc:
                    return cyc
        stack_path.pop()
        color[node] = 2
        return None

    for name in flow.states:
        if color.get(name, 0) == 0:
            cycle = visit(name)
            if cycle:
                out.append(
                    FlowViolation("CycleDetected", cycle[0], f"cycle: {' -> '.join(cycle)}", path=cycle)
                )
                break

    # Parameter references must point at run input or ancestor results.
    if not any(v.code in ("DanglingNext", "CycleDetected", "BadStartAt") for v in out):
        ancestors = _ancestor_result_roots(flow)
        for name, st in flow.states.items():
            if not isinstance(st, ActionState):
                continue
            allowed = {"input"} | ancestors.get(name, set())
            for expr in iter_template_paths(st.parameters):
                root = split_path(expr)[0]
                if root not in allowed:
                    out.append(FlowViolation(
                        "BadState", name,
                        f"state {name!r} references {expr} which is neither run input nor a prior result"))
    return out


def _ancestor_result_roots(flow: FlowDefinition) -> dict[str, set[str]]:
    """For each state, the result-path root keys of every state that can
    precede it on some path from start_at."""
    roots: dict[str, set[str]] = {name: set() for name in flow.states}
    if flow.start_at not in flow.states:
        return roots
    # BFS propagating accumulated ancestor sets; acyclic so this terminates.
    pending = [flow.start_at]
    while pending:
        node = pending.pop()
        st = flow.states[node]
        contribution = set()
        if isinstance(st, ActionState):
            contribution = {split_path(st.result_path)[0]}
        here = roots[node] | contribution
        for nxt in _out_edges(st):
            if nxt in flow.states and not here <= roots[nxt]:
                roots[nxt] |= here
                pending.append(nxt)
    return roots


def validate_flow(flow: FlowDefinition) -> FlowDefinition:
    """Return the flow iff every invariant holds; otherwise raise
    ValidationFailed carrying all violations."""
    violations = flow_violations(flow)
    if violations:
        raise ValidationFailed(
            "; ".join(v.message for v in violations),
            detail={"violations": [
                {"code": v.code, "state": v.state, "message": v.message, "path": list(v.path)}
                for v in violations
            ]},
        )
    return flow


def next_state(flow: FlowDefinition, current: str, outcome: str,
               run_state: dict[str, Any] | None = None) -> str | None:
    """Transition from ``current`` given an action outcome.

    Returns the next state name, or END when the run terminates. A FAILED
    outcome with no on_fail handler raises ValidationFailed("RunFailed")
    so the caller marks the run failed.
    """
    st = flow.states[current]
    if isinstance(st, ChoiceState):
        return st.if_true if st.evaluate(run_state or {}) else st.if_false
    if outcome == "SUCCEEDED":
        return END if st.end else st.next
    if outcome == "FAILED":
        if st.on_fail:
            return st.on_fail
        exc = ValidationFailed(f"step {current} failed with no on_fail handler")
        exc.code = "RunFailed"
        raise exc
    raise ValidationFailed(f"outcome {outcome!r} is not terminal")


# --- tool composition -------------------------------------------------------

@dataclass(frozen=True)
class StateFragment:
    label: str
    action_kind: str
    provider_url: str
    parameters: dict[str, Any]
    result_path: str | None = None  # defaults to $.<label>


@dataclass(frozen=True)
class ToolSpec:
    """A reusable flow fragment: one or more action states plus the input
    keys they require. Most tools contribute a single state; publication
    tools bundle transfer+ingest pairs."""
    name: str
    action_kind: str
    required_input_keys: tuple[str, ...]
    fragments: tuple[StateFragment, ...]
    input_key_docs: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.required_input_keys)) != len(self.required_input_keys):
            raise ValidationFailed(f"tool {self.name}: required_input_keys not distinct")


class EmptyToolChain(ValidationFailed):
    code = "EmptyToolChain"


class ConflictingInputKey(ValidationFailed):
    code = "ConflictingInputKey"


def compose_flow(tools: list[ToolSpec], title: str = "") -> FlowDefinition:
    """Chain tools into a linear flow: fragments in order, last state
    terminal, union of required input keys as the input schema."""
    if not tools:
        raise EmptyToolChain("tool chain is empty")

    key_docs: dict[str, str] = {}
    for tool in tools:
        for key in tool.required_input_keys:
            doc = tool.input_key_docs.get(key, "")
            if key in key_docs and doc and key_docs[key] and doc != key_docs[key]:
                raise ConflictingInputKey(
                    f"input key {key!r} means {key_docs[key]!r} to one tool and {doc!r} to another",
                    detail={"key": key})
            if doc:
                key_docs[key] = doc

    fragments = [frag for tool in tools for frag in tool.fragments]
    states: dict[str, State] = {}
    for i, frag in enumerate(fragments):
        if frag.label in states:
            raise ValidationFailed(f"duplicate state label {frag.label!r} in tool chain",
                                   detail={"name": frag.label, "code": "DuplicateState"})
        last = i == len(fragments) - 1
        states[frag.label] = ActionState(
            provider_url=frag.provider_url,
            action_kind=frag.action_kind,
            parameters=frag.parameters,
            result_path=frag.result_path or f"$.{frag.label}",
            next=END if last else fragments[i + 1].label,
            end=last,
        )
    required = sorted({k for t in tools for k in t.required_input_keys})
    schema = {
        "required": required,
        "properties": {k: ({"description": key_docs[k]} if k in key_docs else {}) for k in required},
    }
    flow = FlowDefinition(title=title or tools[0].name, start_at=fragments[0].label,
                          states=states, input_schema=schema)
    return validate_flow(flow)


def check_input(flow: FlowDefinition, input_doc: dict[str, Any]) -> None:
    """Raise SchemaViolation-shaped ValidationFailed when required input
    keys are missing or the input is not an object."""
    if not isinstance(input_doc, dict):
        exc = ValidationFailed("flow input must be an object")
        exc.code = "InputSchemaViolation"
        raise exc
    missing = [k for k in flow.required_input_keys() if k not in input_doc]
    if missing:
        exc = ValidationFailed(f"input missing required keys: {', '.join(missing)}",
                               detail={"missing": missing})
        exc.code = "InputSchemaViolation"
        raise exc
