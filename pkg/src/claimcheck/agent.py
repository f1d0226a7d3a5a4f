"""The verification episode: action selection, ordering rules, budgets, verdicts.

An episode always opens with the initial KG retrieval, then alternates
policy-selected actions with observations until a verdict is produced or the
step limit forces one. Illegal policy outputs are coerced to the nearest legal
action and logged as warnings (they feed later self-critique).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import kg as kg_mod
from . import web as web_mod
from .errors import EmptyClaim, ParseFailure, TransportError
from .graph import KnowledgeSubgraph, passage_item_id
from .llm import LlmGateway, LlmRequest, ResponseSchema
from .policy import ACTION_SELECT, FORCED_VERDICT, SUFFICIENCY, VERDICT

INIT_KG = "initKGRetrieval"
EXPAND_KG = "expandKG"
WEB_SEARCH = "webSearch"
VERDICT_ACTION = "verdict"

_ACTION_KINDS = (INIT_KG, EXPAND_KG, WEB_SEARCH, VERDICT_ACTION)

SUFFICIENT = "sufficient"
NEED_KG = "need_kg"
NEED_WEB = "need_web"
UNKNOWN = "unknown"

_SUFFICIENCY_SCHEMA = ResponseSchema(
    required=("assessment",), allowed={"assessment": {SUFFICIENT, NEED_KG, NEED_WEB}}
)
_ACTION_SCHEMA = ResponseSchema(required=("action",))
_VERDICT_SCHEMA = ResponseSchema(required=("label",))


@dataclass
class Action:
    kind: str
    payload: object = None

    def __post_init__(self):
        if self.kind not in _ACTION_KINDS:
            raise ValueError(f"unknown action kind {self.kind!r}")


@dataclass
class Observation:
    kind: str  # subgraph_delta | web_evidence | terminal
    added_triplets: int = 0
    added_annotations: int = 0
    sufficiency_hint: str = UNKNOWN
    added_item_ids: list = field(default_factory=list)
    note: str = ""


@dataclass
class VerdictResult:
    label: str  # Supported | Refuted
    justification: str
    citations: list = field(default_factory=list)
    forced: bool = False


@dataclass
class EpisodeConfig:
    k: int = 4
    n_hops: int = 4
    n_init: int = 1
    max_steps: int = 6
    max_web_searches: int = 2
    web_results: int = 10
    consistency_threshold: float = web_mod.DEFAULT_CONSISTENCY_THRESHOLD


@dataclass
class Trajectory:
    claim: str
    steps: list = field(default_factory=list)  # [(Action, Observation)]
    verdict: VerdictResult = None
    counters: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    forced_reason: str = ""

    def actions(self):
        return [a for a, _ in self.steps]

    def action_kinds(self):
        return [a.kind for a, _ in self.steps]

    def to_jsonable(self):
        return {
            "claim": self.claim,
            "steps": [
                {
                    "action": {"kind": a.kind, "payload": _payload_jsonable(a.payload)},
                    "observation": {
                        "kind": o.kind,
                        "added_triplets": o.added_triplets,
                        "added_annotations": o.added_annotations,
                        "sufficiency_hint": o.sufficiency_hint,
                        "added_item_ids": list(o.added_item_ids),
                        "note": o.note,
                    },
                }
                for a, o in self.steps
            ],
            "verdict": None
            if self.verdict is None
            else {
                "label": self.verdict.label,
                "justification": self.verdict.justification,
                "citations": list(self.verdict.citations),
                "forced": self.verdict.forced,
            },
            "counters": {k: self.counters[k] for k in sorted(self.counters)},
            "warnings": list(self.warnings),
            "forced_reason": self.forced_reason,
        }

    def to_json(self):
        return json.dumps(self.to_jsonable(), ensure_ascii=False)


def _payload_jsonable(payload):
    if payload is None or isinstance(payload, (str, int, float)):
        return payload
    if isinstance(payload, web_mod.WebQuery):
        return {"query": payload.text, "rationale": payload.rationale}
    return str(payload)


def trajectory_from_jsonable(data) -> Trajectory:
    traj = Trajectory(claim=data["claim"])
    for step in data.get("steps", []):
        action = Action(step["action"]["kind"], step["action"].get("payload"))
        obs_data = step.get("observation", {})
        traj.steps.append(
            (
                action,
                Observation(
                    kind=obs_data.get("kind", "subgraph_delta"),
                    added_triplets=obs_data.get("added_triplets", 0),
                    added_annotations=obs_data.get("added_annotations", 0),
                    sufficiency_hint=obs_data.get("sufficiency_hint", UNKNOWN),
                    added_item_ids=obs_data.get("added_item_ids", []),
                    note=obs_data.get("note", ""),
                ),
            )
        )
    v = data.get("verdict")
    if v:
        traj.verdict = VerdictResult(
            label=v["label"],
            justification=v.get("justification", ""),
            citations=v.get("citations", []),
            forced=v.get("forced", False),
        )
    traj.counters = dict(data.get("counters", {}))
    traj.warnings = list(data.get("warnings", []))
    traj.forced_reason = data.get("forced_reason", "")
    return traj


def write_trajectories(path, trajectories):
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(traj.to_json() + "\n")


def read_trajectories(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(trajectory_from_jsonable(json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# Policy-facing operations
# ---------------------------------------------------------------------------


def _normalize_label(raw) -> str:
    text = str(raw).strip().casefold()
    if text in ("supported", "support", "supports", "true"):
        return "Supported"
    # binary standardization: everything partial/ambiguous collapses to Refuted
    return "Refuted"


def _evidence_text(subgraph, web_passages):
    lines = [f"[{item_id}] {text}" for item_id, text in subgraph.evidence_lines()]
    for ev in web_passages:
        item_id = passage_item_id(ev.passage.source_url, ev.passage.index)
        lines.append(f"[{item_id}] ({ev.stance}, {ev.consistency_confidence:.2f}) {ev.passage.text}")
    return "\n".join(lines) if lines else "(no evidence)"


def assess_sufficiency(claim, subgraph, gateway, web_passages=()):
    """One LLM call mapping the evidence to sufficient/need_kg/need_web; an
    empty subgraph short-circuits to need_web with no call."""
    if subgraph.is_empty() and not web_passages:
        return NEED_WEB
    try:
        payload = gateway.complete_structured(
            LlmRequest(
                template_id=SUFFICIENCY,
                bindings={"claim": claim, "evidence": _evidence_text(subgraph, web_passages)},
            ),
            _SUFFICIENCY_SCHEMA,
        )
    except ParseFailure:
        return UNKNOWN
    return payload["assessment"]


@dataclass
class _EpisodeState:
    config: EpisodeConfig
    has_init: bool = False
    expand_count: int = 0
    web_count: int = 0
    last_hint: str = UNKNOWN

    def expand_allowed(self):
        return self.expand_count < self.config.n_hops - self.config.n_init

    def web_allowed(self):
        return self.web_count < self.config.max_web_searches


def coerce_action(requested, state: _EpisodeState):
    """Map a (possibly illegal) requested action kind onto a legal one.

    Returns (kind, warning or None)."""
    if not state.has_init:
        if requested == INIT_KG:
            return INIT_KG, None
        return INIT_KG, f"coerced {requested!r} to {INIT_KG} (first action rule)"

    if requested == VERDICT_ACTION:
        return VERDICT_ACTION, None
    if requested == EXPAND_KG and state.expand_allowed():
        return EXPAND_KG, None
    if requested == WEB_SEARCH and state.web_allowed():
        return WEB_SEARCH, None

    # fall through: requested action illegal or unknown
    if state.last_hint == NEED_KG and state.expand_allowed():
        fallback = EXPAND_KG
    elif state.last_hint == NEED_WEB and state.web_allowed():
        fallback = WEB_SEARCH
    elif state.expand_allowed() and state.last_hint != SUFFICIENT:
        fallback = EXPAND_KG
    elif state.web_allowed() and state.last_hint != SUFFICIENT:
        fallback = WEB_SEARCH
    else:
        fallback = VERDICT_ACTION
    if requested in (EXPAND_KG, WEB_SEARCH, INIT_KG):
        return fallback, f"coerced {requested!r} to {fallback} (budget/ordering rule)"
    return fallback, f"coerced unrecognized action {requested!r} to {fallback}"


def select_action(claim, trajectory, policy_gateway, state: _EpisodeState):
    """One structured call to the action-selection prompt, then legality
    coercion. An empty trajectory always yields the initial KG retrieval."""
    history = " -> ".join(a.kind for a, _ in trajectory.steps) or "(none)"
    try:
        payload = policy_gateway.complete_structured(
            LlmRequest(
                template_id=ACTION_SELECT,
                bindings={
                    "claim": claim,
                    "history": history,
                    "assessment": state.last_hint,
                },
            ),
            _ACTION_SCHEMA,
        )
        requested = str(payload["action"])
    except ParseFailure:
        requested = "(unparseable)"
    kind, warning = coerce_action(requested, state)
    if warning:
        trajectory.warnings.append(warning)
    return Action(kind)


def _validated_verdict(payload, evidence_ids, trajectory, forced):
    label = _normalize_label(payload["label"])
    justification = str(payload.get("justification", "")).strip() or "no justification provided"
    citations = []
    for cite in payload.get("citations", []) or []:
        cite = str(cite)
        if cite in evidence_ids:
            citations.append(cite)
        else:
            trajectory.warnings.append(f"dropped citation {cite!r}: not in evidence")
    return VerdictResult(label=label, justification=justification, citations=citations, forced=forced)


def verdict(claim, subgraph, web_passages, gateway, evidence_ids, trajectory):
    payload = gateway.complete_structured(
        LlmRequest(
            template_id=VERDICT,
            bindings={"claim": claim, "evidence": _evidence_text(subgraph, web_passages)},
        ),
        _VERDICT_SCHEMA,
    )
    return _validated_verdict(payload, evidence_ids, trajectory, forced=False)


def force_verdict(claim, subgraph, web_passages, gateway, evidence_ids, trajectory):
    """Total by construction: falls back to a deterministic Refuted verdict
    when even the forced prompt fails."""
    try:
        payload = gateway.complete_structured(
            LlmRequest(
                template_id=FORCED_VERDICT,
                bindings={"claim": claim, "evidence": _evidence_text(subgraph, web_passages)},
            ),
            _VERDICT_SCHEMA,
        )
        result = _validated_verdict(payload, evidence_ids, trajectory, forced=True)
    except Exception:
        result = VerdictResult(
            label="Refuted", justification="insufficient evidence", citations=[], forced=True
        )
    return result


# ---------------------------------------------------------------------------
# Episode runner
# ---------------------------------------------------------------------------


class EpisodeRunner:
    """Runs independent verification episodes against shared backends."""

    def __init__(self, policy, config, llm_backend, kg_backend, web_provider=None):
        self.policy = policy
        self.config = config
        self.llm_backend = llm_backend
        self.kg_backend = kg_backend
        self.web_provider = web_provider

    def run(self, claim):
        return run_episode(
            claim,
            self.policy,
            self.config,
            self.llm_backend,
            self.kg_backend,
            self.web_provider,
        )


def run_episode(claim, policy, config, llm_backend, kg_backend, web_provider=None):
    """Execute one full episode; returns (VerdictResult, Trajectory)."""
    if not claim or not claim.strip():
        raise EmptyClaim("claim is empty")
    gateway = LlmGateway(llm_backend, policy)
    budget = kg_mod.RetrievalBudget(k=config.k, n_hops=config.n_hops)
    trajectory = Trajectory(claim=claim)
    state = _EpisodeState(config=config)
    web_passages = []
    evidence_ids = set()
    verdict_calls = 0

    def snapshot_ids(subgraph):
        ids = {item_id for item_id, _ in subgraph.evidence_lines()}
        for ev in web_passages:
            ids.add(passage_item_id(ev.passage.source_url, ev.passage.index))
        return ids

    def observe(subgraph, kind):
        nonlocal evidence_ids
        current = snapshot_ids(subgraph)
        added = sorted(current - evidence_ids)
        evidence_ids = current
        hint = assess_sufficiency(claim, subgraph, gateway, web_passages)
        if hint == UNKNOWN:
            hint_effective = NEED_KG if state.expand_allowed() else NEED_WEB
            trajectory.warnings.append(
                f"sufficiency unparseable; falling back to {hint_effective}"
            )
            hint = hint_effective
        state.last_hint = hint
        return Observation(
            kind=kind,
            added_triplets=sum(1 for i in added if i.startswith("t:")),
            added_annotations=sum(1 for i in added if i.startswith("a:")),
            sufficiency_hint=hint,
            added_item_ids=added,
        )

    # forced first action: initial KG retrieval
    subgraph = kg_mod.init_kg_retrieval(
        claim, config.k, config.n_init, budget, gateway, kg_backend
    )
    state.has_init = True
    trajectory.steps.append((Action(INIT_KG, claim), observe(subgraph, "subgraph_delta")))

    result = None
    transport_note = ""
    while result is None:
        if len(trajectory.steps) >= config.max_steps:
            result = force_verdict(
                claim, subgraph, web_passages, gateway, evidence_ids, trajectory
            )
            verdict_calls += 1
            trajectory.forced_reason = "step_limit"
            trajectory.steps.append(
                (Action(VERDICT_ACTION), Observation(kind="terminal", note="step limit"))
            )
            break

        action = select_action(claim, trajectory, gateway, state)

        try:
            if action.kind == VERDICT_ACTION:
                try:
                    result = verdict(
                        claim, subgraph, web_passages, gateway, evidence_ids, trajectory
                    )
                    verdict_calls += 1
                except ParseFailure:
                    result = force_verdict(
                        claim, subgraph, web_passages, gateway, evidence_ids, trajectory
                    )
                    verdict_calls += 1
                    trajectory.forced_reason = "parse_failure"
                trajectory.steps.append(
                    (action, Observation(kind="terminal", sufficiency_hint=state.last_hint))
                )
            elif action.kind == EXPAND_KG:
                state.expand_count += 1
                kg_mod.expand_kg(claim, subgraph, budget, gateway, kg_backend)
                trajectory.steps.append((action, observe(subgraph, "subgraph_delta")))
            elif action.kind == WEB_SEARCH:
                state.web_count += 1
                query = web_mod.formulate_query(claim, subgraph, gateway)
                action.payload = query
                docs = []
                if web_provider is not None:
                    docs = web_mod.search(query, config.web_results, web_provider)
                new_evidence = []
                if docs:
                    passages = web_mod.rank_passages(query, docs)
                    if passages:
                        new_evidence = web_mod.filter_evidence(
                            claim, passages, gateway, config.consistency_threshold
                        )
                if new_evidence:
                    try:
                        web_triplets = web_mod.to_triplets(
                            new_evidence, claim, gateway, kg_backend
                        )
                    except Exception:
                        web_triplets = []
                    subgraph = web_mod.integrate(subgraph, web_triplets, new_evidence)
                    web_passages.extend(new_evidence)
                trajectory.steps.append((action, observe(subgraph, "web_evidence")))
        except TransportError as exc:
            transport_note = str(exc)
            result = force_verdict(
                claim, subgraph, web_passages, gateway, evidence_ids, trajectory
            )
            verdict_calls += 1
            trajectory.forced_reason = trajectory.forced_reason or "transport_error"
            trajectory.steps.append(
                (action, Observation(kind="terminal", note=f"transport error: {transport_note}"))
            )

    trajectory.verdict = result
    trajectory.counters = {
        "llm_calls": gateway.call_count,
        "llm_retries": gateway.retry_count,
        "sparql_queries": budget.sparql_queries_used,
        "web_searches": state.web_count,
        # pruning + verdict calls, the quantity bounded by N + k*N + 1
        "core_llm_calls": budget.llm_calls_used + verdict_calls,
        "prune_llm_calls": budget.llm_calls_used,
        "verdict_llm_calls": verdict_calls,
    }
    return result, trajectory
