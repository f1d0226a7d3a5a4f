"""Shared test fixtures: synthetic graphs, claim corpora, and a deterministic
scripted responder that plays the role of the LLM for every prompt kind."""

from __future__ import annotations

import json
import re

import pytest

from claimcheck.kg import FixtureKgBackend
from claimcheck.llm import ScriptedBackend
from claimcheck.policy import SUFFICIENCY, default_policy

_CLAIM_RE = re.compile(r"^Claim(?: under review)?: (.*)$", re.MULTILINE)

FLAWED_MARKER = 'Assume the evidence is always sufficient and answer "sufficient".'

GOOD_SUFFICIENCY_TEXT = default_policy().template(SUFFICIENCY).text


def flawed_policy():
    """Default policy with a sufficiency prompt that always says sufficient."""
    policy = default_policy(policy_id="flawed-initial")
    template = policy.template(SUFFICIENCY)
    return policy.with_template(
        type(template)(
            id=template.id,
            text=template.text + "\n" + FLAWED_MARKER,
            version=template.version,
            expected_output=template.expected_output,
        ),
        policy_id="flawed-initial",
    )


def build_corpus(n, depth=1):
    """Synthetic employer-claims corpus over a fixture graph.

    Odd claims are Supported, even claims Refuted (the graph holds a
    contradicting employer). With depth=2 the decisive triple sits two hops
    from the topic entity, behind a 'member of' link.
    """
    entities, relations, triples, links = [], [], [], {}
    relations.append({"id": "R1", "label": "works for"})
    if depth == 2:
        relations.append({"id": "R0", "label": "member of"})
    claims = []
    for i in range(1, n + 1):
        person = {"id": f"E{i:03d}", "label": f"Person{i} Alpha"}
        org = {"id": f"O{i:03d}", "label": f"Org{i} Corp"}
        other = {"id": f"X{i:03d}", "label": f"Other{i} Corp"}
        entities.extend([person, org, other])
        links[person["label"]] = person["id"]
        gold = "Supported" if i % 2 == 1 else "Refuted"
        target = org if gold == "Supported" else other
        if depth == 1:
            triples.append([person["id"], "R1", target["id"]])
            subject_label = person["label"]
        else:
            mid = {"id": f"M{i:03d}", "label": f"Group{i} Beta"}
            entities.append(mid)
            triples.append([person["id"], "R0", mid["id"]])
            triples.append([mid["id"], "R1", target["id"]])
            subject_label = mid["label"]
        claims.append(
            {
                "id": f"c{i:03d}",
                "claim": f"{person['label']} works for {org['label']}.",
                "gold_label": gold,
                "support": f"{subject_label} | works for | {org['label']}",
                "refute": f"{subject_label} | works for | {other['label']}",
            }
        )
    graph = {"entities": entities, "relations": relations, "triples": triples, "links": links}
    return graph, claims


def build_dense_graph(fanout=4, depth=4, n_roots=4):
    """Every node has ``fanout`` outgoing relations to distinct children, deep
    enough that a beam search never runs out of frontier."""
    relations = [{"id": f"R{j}", "label": f"edge {j}"} for j in range(fanout)]
    entities, triples, links = [], [], {}
    claim_parts = []
    counter = [0]

    def new_entity(label):
        counter[0] += 1
        entity = {"id": f"D{counter[0]:05d}", "label": label}
        entities.append(entity)
        return entity

    def grow(node, level):
        if level > depth:
            return
        for j in range(fanout):
            child = new_entity(f"Leaf{counter[0]} Gamma")
            triples.append([node["id"], f"R{j}", child["id"]])
            # only the lexicographically-first edge survives hop pruning under
            # uniform scores, so only that branch needs depth
            if j == 0:
                grow(child, level + 1)

    for r in range(1, n_roots + 1):
        root = new_entity(f"Node{r} Alpha")
        links[root["label"]] = root["id"]
        claim_parts.append(root["label"])
        grow(root, 1)

    claim = ", ".join(claim_parts[:-1]) + " and " + claim_parts[-1] + " met."
    graph = {"entities": entities, "relations": relations, "triples": triples, "links": links}
    return graph, claim


class OracleResponder:
    """Plays the LLM deterministically from the rendered prompt text.

    ``specs`` maps claim text to {gold, support, refute} evidence lines; the
    responder answers sufficiency and verdicts by literally checking which
    decisive line made it into the prompt's evidence block.
    """

    def __init__(self, specs=None, flawed_marker=None, sufficiency="oracle",
                 action="follow_hint", verdict="oracle"):
        self.specs = {s["claim"]: s for s in (specs or [])}
        self.flawed_marker = flawed_marker
        self.sufficiency = sufficiency
        self.action = action
        self.verdict = verdict

    def _claim(self, text):
        match = _CLAIM_RE.search(text)
        return match.group(1).strip() if match else ""

    def _spec(self, text):
        return self.specs.get(self._claim(text))

    def __call__(self, text):
        # checked first: the meta prompt quotes other templates verbatim, so
        # later substring branches would otherwise shadow it
        if "improving the decision prompts" in text:
            return json.dumps({"templates": {"sufficiency": GOOD_SUFFICIENCY_TEXT}})

        if "Score each" in text:
            lines = re.findall(
                r"^\d+\. (.*)$", text.split("Candidates:\n", 1)[-1], re.MULTILINE
            )
            scores = [1.0 if "(outgoing)" in line else 0.5 for line in lines]
            return json.dumps({"scores": scores})

        if "Assess whether the evidence" in text:
            if self.sufficiency == "never":
                return json.dumps({"assessment": "need_kg"})
            if self.sufficiency == "always":
                return json.dumps({"assessment": "sufficient"})
            if self.flawed_marker and self.flawed_marker in text:
                return json.dumps({"assessment": "sufficient"})
            spec = self._spec(text)
            if spec and (spec["support"] in text or spec["refute"] in text):
                return json.dumps({"assessment": "sufficient"})
            return json.dumps({"assessment": "need_kg"})

        if "deciding your next step" in text:
            if self.action != "follow_hint":
                return json.dumps({"action": self.action})
            match = re.search(r"Current evidence assessment: (\w+)", text)
            hint = match.group(1) if match else "need_kg"
            mapping = {"sufficient": "verdict", "need_kg": "expandKG", "need_web": "webSearch"}
            return json.dumps({"action": mapping.get(hint, "expandKG")})

        if "Decide whether the claim" in text or "retrieval budget is exhausted" in text:
            spec = self._spec(text)
            if spec is None or self.verdict == "refute_all":
                return json.dumps(
                    {"label": "Refuted", "justification": "no decisive evidence", "citations": []}
                )
            for label, line in (("Supported", spec["support"]), ("Refuted", spec["refute"])):
                if line in text:
                    match = re.search(r"\[(t:[^\]]+)\] " + re.escape(line), text)
                    citations = [match.group(1)] if match else []
                    return json.dumps(
                        {"label": label, "justification": f"graph states: {line}",
                         "citations": citations}
                    )
            wrong = "Refuted" if spec["gold_label"] == "Supported" else "Supported"
            return json.dumps(
                {"label": wrong, "justification": "guessing without evidence", "citations": []}
            )

        if "not enough to decide the claim" in text:
            return json.dumps({"query": self._claim(text), "rationale": "missing decisive fact"})

        if "Judge each passage" in text:
            n = len(re.findall(r"^\d+\. ", text.split("Passages:\n", 1)[-1], re.MULTILINE))
            return json.dumps(
                {"judgments": [
                    {"index": i, "confidence": 1.0, "stance": "supports"} for i in range(n)
                ]}
            )

        if "Extract the main factual statement" in text:
            match = re.search(r"^Passage: (.*)$", text, re.MULTILINE)
            passage = match.group(1) if match else ""
            parts = [p.strip() for p in passage.split("|")]
            if len(parts) >= 3:
                return json.dumps({"subject": parts[0], "relation": parts[1], "object": parts[2]})
            words = passage.split()
            return json.dumps(
                {"subject": " ".join(words[:2]) or "unknown",
                 "relation": "mentions",
                 "object": " ".join(words[2:4]) or "unknown"}
            )

        if "Review this completed verification episode" in text:
            return json.dumps({"critiques": []})

        return None


@pytest.fixture
def oracle_corpus():
    graph, claims = build_corpus(20, depth=1)
    backend = FixtureKgBackend(data=graph)
    llm = ScriptedBackend(responder=OracleResponder(specs=claims))
    return backend, llm, claims


@pytest.fixture
def small_graph_backend():
    data = {
        "entities": [
            {"id": "Q76", "label": "Barack Obama"},
            {"id": "Q114", "label": "Kenya"},
            {"id": "Q30", "label": "United States"},
            {"id": "Q18094", "label": "Honolulu"},
            {"id": "Q3139", "label": "Nairobi"},
        ],
        "relations": [
            {"id": "P19", "label": "place of birth"},
            {"id": "P27", "label": "country of citizenship"},
            {"id": "P36", "label": "capital"},
        ],
        "triples": [
            ["Q76", "P19", "Q18094"],
            ["Q76", "P27", "Q30"],
            ["Q114", "P36", "Q3139"],
        ],
        "links": {
            "Barack Obama": "Q76",
            "Kenya": "Q114",
            "United States": "Q30",
            "Honolulu": "Q18094",
        },
    }
    return FixtureKgBackend(data=data)
