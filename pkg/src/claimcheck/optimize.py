"""Offline policy improvement: self-critique, composite reward, and
prompt-text updates driven by critique batches.

The base model is never touched; only prompt template text and versions change,
and only here. Candidate policies are accepted per epoch only on strict
validation improvement, and the best accepted candidate wins.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

from .agent import EXPAND_KG, INIT_KG, SUFFICIENT, WEB_SEARCH
from .errors import InsufficientData, ParseFailure
from .llm import LlmGateway, LlmRequest, PromptTemplate, ResponseSchema
from .policy import ACTION_SELECT, REFLECT, SUFFICIENCY, VERDICT, PromptPolicy

INSUFFICIENT_COVERAGE = "InsufficientCoverage"
PREMATURE_TERMINATION = "PrematureTermination"
REDUNDANT_RETRIEVAL = "RedundantRetrieval"
CONTRADICTION_MISHANDLED = "ContradictionMishandled"
OTHER = "Other"

CRITIQUE_TAGS = {
    INSUFFICIENT_COVERAGE,
    PREMATURE_TERMINATION,
    REDUNDANT_RETRIEVAL,
    CONTRADICTION_MISHANDLED,
    OTHER,
}

# reward weights: correctness dominates, sufficiency and efficiency tie-break
W_CORRECTNESS = 1.0
W_SUFFICIENCY = 0.25
STEP_PENALTY = 0.05

RETRIEVAL_KINDS = (INIT_KG, EXPAND_KG, WEB_SEARCH)

_REFLECT_SCHEMA = ResponseSchema(required=("critiques",))
_META_SCHEMA = ResponseSchema(required=("templates",))

# The meta-optimizer prompt is fixed machinery, not part of the trainable policy.
META_OPTIMIZER_PROMPT = PromptTemplate(
    id="meta_optimizer",
    expected_output="structured",
    text=(
        "You are improving the decision prompts of a fact-checking agent.\n"
        "Observed failure critiques:\n{critiques}\n"
        "Current prompt templates (only these may be revised):\n{templates}\n"
        "Propose revised text for the templates that would prevent these failures. "
        "Keep the required JSON reply format instructions inside each template.\n"
        'Reply as JSON: {"templates": {"<template_id>": "<new text>", ...}}'
    ),
)


@dataclass
class Critique:
    tag: str
    step_index: int
    text: str


@dataclass
class ExperienceRecord:
    state_digest: str
    action: str
    observation_digest: str
    reward: float
    critiques: list = field(default_factory=list)

    def to_jsonable(self):
        return {
            "state_digest": self.state_digest,
            "action": self.action,
            "observation_digest": self.observation_digest,
            "reward": self.reward,
            "critiques": [
                {"tag": c.tag, "step_index": c.step_index, "text": c.text}
                for c in self.critiques
            ],
        }


@dataclass
class CompositeReward:
    correctness: int
    sufficiency: float
    efficiency_penalty: float
    total: float


@dataclass
class OptimizationConfig:
    epochs: int = 20
    train_size: int = 100
    val_size: int = 50
    seed: int = 0


@dataclass
class OptimizationRun:
    history: list = field(default_factory=list)
    selected: PromptPolicy = None
    initial_val_reward: float = 0.0
    selected_val_reward: float = 0.0

    def to_jsonable(self):
        return {
            "history": list(self.history),
            "initial_val_reward": self.initial_val_reward,
            "selected_val_reward": self.selected_val_reward,
            "selected_policy_id": self.selected.policy_id if self.selected else None,
            "selected_policy": self.selected.to_jsonable() if self.selected else None,
        }


# ---------------------------------------------------------------------------
# Reward
# ---------------------------------------------------------------------------


def _superfluous_actions(trajectory):
    """Retrieval actions after the step that produced the last cited item."""
    cited = set(trajectory.verdict.citations) if trajectory.verdict else set()
    last_useful = 0
    for i, (_, obs) in enumerate(trajectory.steps):
        if cited & set(obs.added_item_ids):
            last_useful = i
    count = 0
    for i, (action, _) in enumerate(trajectory.steps):
        if action.kind in RETRIEVAL_KINDS and i > last_useful:
            count += 1
    return count


def compute_reward(trajectory, gold_label) -> CompositeReward:
    if trajectory.verdict is None:
        raise ValueError("compute_reward requires a terminal trajectory")
    correctness = 1 if trajectory.verdict.label == gold_label else 0
    citations = trajectory.verdict.citations
    if citations:
        # citations are already validated against the evidence set at verdict
        # time, so resolution is a ratio over what the verdict claimed to use
        all_items = set()
        for _, obs in trajectory.steps:
            all_items.update(obs.added_item_ids)
        resolved = sum(1 for c in citations if c in all_items)
        sufficiency = resolved / len(citations)
    else:
        sufficiency = 0.0
    penalty = -STEP_PENALTY * _superfluous_actions(trajectory)
    total = W_CORRECTNESS * correctness + W_SUFFICIENCY * sufficiency + penalty
    total = max(-1.0, min(1.25, total))
    return CompositeReward(
        correctness=correctness,
        sufficiency=sufficiency,
        efficiency_penalty=penalty,
        total=total,
    )


# ---------------------------------------------------------------------------
# Reflection
# ---------------------------------------------------------------------------


def rule_based_critiques(trajectory, gold_label) -> list:
    """Deterministic pre-tags that survive even a degraded critique model."""
    if trajectory.verdict is None:
        return []
    correct = trajectory.verdict.label == gold_label
    kinds = trajectory.action_kinds()
    expansions = kinds.count(EXPAND_KG)
    out = []
    terminal_index = len(trajectory.steps) - 1
    if not correct and expansions == 0:
        out.append(
            Critique(
                tag=PREMATURE_TERMINATION,
                step_index=terminal_index,
                text="wrong verdict with no graph expansion beyond the initial retrieval",
            )
        )
    if not correct and expansions >= 1:
        for i, kind in enumerate(kinds):
            if kind == WEB_SEARCH and EXPAND_KG in kinds[:i]:
                out.append(
                    Critique(
                        tag=INSUFFICIENT_COVERAGE,
                        step_index=i,
                        text="web retrieval was still needed after graph expansion",
                    )
                )
                break
    if correct:
        saw_sufficient = False
        for i, (action, obs) in enumerate(trajectory.steps):
            if saw_sufficient and action.kind == EXPAND_KG:
                out.append(
                    Critique(
                        tag=REDUNDANT_RETRIEVAL,
                        step_index=i,
                        text="expansion continued after evidence was assessed sufficient",
                    )
                )
                break
            if obs.sufficiency_hint == SUFFICIENT:
                saw_sufficient = True
    return out


def reflect(trajectory, gold_label, gateway=None) -> list:
    """One structured critique call plus the deterministic rule-based tags."""
    critiques = []
    if gateway is not None and trajectory.verdict is not None:
        steps_text = "\n".join(
            f"{i}: {action.kind} (hint={obs.sufficiency_hint}, "
            f"+{obs.added_triplets}t/+{obs.added_annotations}a)"
            for i, (action, obs) in enumerate(trajectory.steps)
        )
        try:
            payload = gateway.complete_structured(
                LlmRequest(
                    template_id=REFLECT,
                    bindings={
                        "claim": trajectory.claim,
                        "gold": gold_label,
                        "predicted": trajectory.verdict.label,
                        "trajectory": steps_text,
                    },
                ),
                _REFLECT_SCHEMA,
            )
            for row in payload["critiques"]:
                tag = row.get("tag", OTHER)
                if tag not in CRITIQUE_TAGS:
                    tag = OTHER
                step_index = int(row.get("step_index", 0))
                step_index = max(0, min(step_index, len(trajectory.steps) - 1))
                critiques.append(Critique(tag=tag, step_index=step_index, text=str(row.get("text", ""))))
        except Exception:
            pass
    critiques.extend(rule_based_critiques(trajectory, gold_label))
    return critiques


def experience_record(trajectory, gold_label, critiques) -> ExperienceRecord:
    reward = compute_reward(trajectory, gold_label)
    final_action = trajectory.steps[-1][0].kind if trajectory.steps else ""
    return ExperienceRecord(
        state_digest=json.dumps(
            {"claim": trajectory.claim, "actions": trajectory.action_kinds()},
            sort_keys=True,
        ),
        action=final_action,
        observation_digest=trajectory.verdict.label if trajectory.verdict else "",
        reward=reward.total,
        critiques=list(critiques),
    )


def write_buffer(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_jsonable(), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Textual-gradient prompt update
# ---------------------------------------------------------------------------

_TAG_TARGETS = {
    PREMATURE_TERMINATION: (SUFFICIENCY, ACTION_SELECT),
    INSUFFICIENT_COVERAGE: (SUFFICIENCY, ACTION_SELECT),
    CONTRADICTION_MISHANDLED: (VERDICT,),
    REDUNDANT_RETRIEVAL: (ACTION_SELECT,),
    OTHER: (ACTION_SELECT,),
}


def textual_gradient(records, current: PromptPolicy, llm_backend, candidate_id=None):
    """One meta-model call proposing revised text for the templates implicated
    by the batch's critique tags; untouched templates stay byte-identical."""
    critiques = [c for rec in records for c in rec.critiques]
    if not critiques:
        raise ValueError("textual_gradient requires a batch with critiques")

    targets = set()
    for c in critiques:
        targets.update(_TAG_TARGETS.get(c.tag, (ACTION_SELECT,)))

    critique_lines = "\n".join(
        f"- [{c.tag}] step {c.step_index}: {c.text}" for c in critiques[:50]
    )
    template_lines = "\n".join(
        f"### {tid}\n{current.template(tid).text}" for tid in sorted(targets)
    )
    meta_policy = PromptPolicy([META_OPTIMIZER_PROMPT], policy_id="meta")
    gateway = LlmGateway(llm_backend, meta_policy)
    payload = gateway.complete_structured(
        LlmRequest(
            template_id="meta_optimizer",
            bindings={"critiques": critique_lines, "templates": template_lines},
        ),
        _META_SCHEMA,
    )

    candidate = current
    changed = False
    for tid, new_text in sorted(payload["templates"].items()):
        if tid not in targets or tid not in current.template_ids():
            continue
        old = current.template(tid)
        new_text = str(new_text)
        if new_text == old.text:
            continue
        candidate = candidate.with_template(
            PromptTemplate(
                id=tid,
                text=new_text,
                version=old.version + 1,
                expected_output=old.expected_output,
            )
        )
        changed = True
    if not changed:
        return None
    return PromptPolicy(
        [candidate.template(tid) for tid in candidate.template_ids()],
        policy_id=candidate_id or f"{current.policy_id}+1",
    )


# ---------------------------------------------------------------------------
# Optimization loop
# ---------------------------------------------------------------------------


def _mean_val_reward(policy, claims, runner_factory):
    runner = runner_factory(policy)
    total = 0.0
    for record in claims:
        _, trajectory = runner.run(record["claim"])
        total += compute_reward(trajectory, record["gold_label"]).total
    return total / len(claims)


def optimize(initial, claims, config, runner_factory, reflection_backend, meta_backend=None):
    """Hill-climb the prompt policy over labeled claims.

    ``claims`` is a list of {"id", "claim", "gold_label"}; ``runner_factory``
    maps a policy to an episode runner. Returns an OptimizationRun whose
    selected policy never validates worse than the initial one.
    """
    needed = config.train_size + config.val_size
    if len(claims) < needed:
        raise InsufficientData(f"need >= {needed} labeled claims, got {len(claims)}")
    meta_backend = meta_backend or reflection_backend

    rng = random.Random(config.seed)
    pool = sorted(claims, key=lambda r: str(r["id"]))
    rng.shuffle(pool)
    train = pool[: config.train_size]
    val = pool[config.train_size : needed]
    assert not ({r["id"] for r in train} & {r["id"] for r in val})

    run = OptimizationRun()
    current = initial
    current_val = _mean_val_reward(initial, val, runner_factory)
    run.initial_val_reward = current_val
    best, best_val = initial, current_val

    for epoch in range(1, config.epochs + 1):
        records = []
        runner = runner_factory(current)
        for record in train:
            _, trajectory = runner.run(record["claim"])
            gateway = LlmGateway(reflection_backend, current)
            critiques = reflect(trajectory, record["gold_label"], gateway)
            records.append(experience_record(trajectory, record["gold_label"], critiques))

        entry = {"epoch": epoch, "policy_id": None, "val_reward": None, "accepted": False}
        batch = [r for r in records if r.critiques]
        candidate = None
        if batch:
            try:
                candidate = textual_gradient(
                    batch, current, meta_backend, candidate_id=f"candidate-{epoch}"
                )
            except ParseFailure:
                candidate = None
        if candidate is not None:
            cand_val = _mean_val_reward(candidate, val, runner_factory)
            entry["policy_id"] = candidate.policy_id
            entry["val_reward"] = cand_val
            if cand_val > current_val:
                current, current_val = candidate, cand_val
                entry["accepted"] = True
                if cand_val > best_val:
                    best, best_val = candidate, cand_val
        run.history.append(entry)

    run.selected = best
    run.selected_val_reward = best_val
    return run
