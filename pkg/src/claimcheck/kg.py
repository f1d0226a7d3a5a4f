"""Knowledge-graph evidence retrieval.

Entity mentions are extracted heuristically from the claim, linked to graph
nodes, and the subgraph grows by hop-wise expand-and-prune beam search: per hop
at most ``k`` frontier entities are expanded (one graph query each), every
expanded entity's relations are pruned by one LLM scoring call, and one more
LLM call prunes the hop's union down to the top ``k`` relations overall.

Budget accounting follows the expansion model: one "query" = one entity
expansion (its incoming and outgoing template executions count together), so an
episode uses at most ``k*N`` expansions and ``N + k*N`` pruning LLM calls.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import re
import time
from dataclasses import dataclass, field

from .errors import (
    AllMentionsUnlinkable,
    BudgetExhausted,
    EmptyClaim,
    ParseFailure,
    QueryTimeout,
    TransportError,
)
from .graph import EntityId, KnowledgeSubgraph, RelationId, Triplet
from .llm import LlmRequest, ResponseSchema
from .policy import EXPANSION_PRUNE, RELATION_PRUNE

MAX_OBJECTS_PER_RELATION = 10
RELATION_FETCH_LIMIT = 50

_SCORES_SCHEMA = ResponseSchema(required=("scores",))


@dataclass
class EntityMention:
    surface: str
    span: tuple  # (start, end) character offsets, end exclusive
    candidate_ids: list = field(default_factory=list)


@dataclass
class RelationCandidate:
    relation: RelationId
    direction: str  # outgoing | incoming
    anchor: EntityId
    sample_objects: list = field(default_factory=list)
    score: float = 0.0


@dataclass
class RetrievalBudget:
    """Per-episode counters against the k*N / N+k*N expansion model."""

    k: int = 4
    n_hops: int = 4
    sparql_queries_used: int = 0
    llm_calls_used: int = 0

    def charge_expansion(self):
        if self.sparql_queries_used >= self.k * self.n_hops:
            raise BudgetExhausted(
                f"expansion budget k*N={self.k * self.n_hops} exhausted"
            )
        self.sparql_queries_used += 1

    def charge_llm(self):
        self.llm_calls_used += 1


# ---------------------------------------------------------------------------
# Mention extraction
# ---------------------------------------------------------------------------

_CAP_TOKEN_RE = re.compile(r"[A-Z][\w'’-]*")
_QUOTED_RE = re.compile(r"[\"“]([^\"”]+)[\"”]")
_YEAR_RE = re.compile(r"\b(1[0-9]{3}|20[0-9]{2})\b")
_SENTENCE_START_RE = re.compile(r"(?:^|[.!?]\s+)(\S)")


def _sentence_starts(text: str) -> set:
    return {m.start(1) for m in _SENTENCE_START_RE.finditer(text)}


def extract_mentions(claim_text: str) -> list:
    """Heuristic mention spans: runs of capitalized tokens (excluding bare
    sentence-initial words), quoted spans, and 4-digit years."""
    if not claim_text or not claim_text.strip():
        raise EmptyClaim("claim is empty")
    starts = _sentence_starts(claim_text)

    spans = []
    run = None
    for m in _CAP_TOKEN_RE.finditer(claim_text):
        if run is not None and claim_text[run[1] : m.start()] == " ":
            run = (run[0], m.end(), run[2] + 1)
        else:
            if run is not None:
                spans.append(run)
            run = (m.start(), m.end(), 1)
    if run is not None:
        spans.append(run)
    # a lone capitalized token at a sentence start is not evidence of a name
    spans = [(s, e) for s, e, n in spans if not (n == 1 and s in starts)]

    for m in _QUOTED_RE.finditer(claim_text):
        spans.append((m.start(1), m.end(1)))
    for m in _YEAR_RE.finditer(claim_text):
        spans.append((m.start(), m.end()))

    # keep non-overlapping spans, longest-first priority
    chosen = []
    for start, end in sorted(set(spans), key=lambda s: (s[0], -(s[1] - s[0]))):
        if all(end <= c[0] or start >= c[1] for c in chosen):
            chosen.append((start, end))
    chosen.sort()
    return [EntityMention(surface=claim_text[s:e], span=(s, e)) for s, e in chosen]


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class FixtureKgBackend:
    """In-memory graph loaded from the fixture JSON schema:
    {entities: [{id,label}], relations: [{id,label}], triples: [[s,p,o]],
    links: {surface -> entity id}}.
    """

    def __init__(self, data=None, path=None):
        if data is None:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        self.entities = {e["id"]: EntityId(e["id"], e.get("label", "")) for e in data["entities"]}
        self.relations = {
            r["id"]: RelationId(r["id"], r.get("label", "")) for r in data["relations"]
        }
        self.links = {surface.casefold(): eid for surface, eid in data.get("links", {}).items()}
        self._out = {}
        self._in = {}
        for s, p, o in data.get("triples", []):
            self._out.setdefault(s, {}).setdefault(p, []).append(o)
            self._in.setdefault(o, {}).setdefault(p, []).append(s)

    def search_entities(self, text, limit=5):
        eid = self.links.get(text.casefold())
        if eid and eid in self.entities:
            return [self.entities[eid]]
        if self.links:
            # an explicit link table is authoritative about what is linkable
            return []
        hits = [
            e
            for e in self.entities.values()
            if e.label.casefold() == text.casefold()
        ]
        return sorted(hits, key=lambda e: e.id)[:limit]

    def entity_label(self, entity_id):
        entity = self.entities.get(entity_id)
        return entity.label if entity else entity_id

    def relations_of(self, entity_id, direction, limit=RELATION_FETCH_LIMIT):
        """Grouped adjacency: list of (RelationId, [neighbor EntityId])."""
        table = self._out if direction == "outgoing" else self._in
        adjacency = table.get(entity_id, {})
        out = []
        for rel_id in sorted(adjacency):
            rel = self.relations.get(rel_id, RelationId(rel_id, rel_id))
            neighbors = [
                self.entities.get(n, EntityId(n, n)) for n in sorted(set(adjacency[rel_id]))
            ]
            out.append((rel, neighbors))
            if len(out) >= limit:
                break
        return out


class SparqlCache:
    """On-disk response cache keyed by query text; enables offline replay."""

    def __init__(self, directory):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)

    def _path(self, query):
        name = hashlib.sha256(query.encode("utf-8")).hexdigest() + ".json"
        return os.path.join(self.directory, name)

    def get(self, query):
        path = self._path(query)
        if os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                return json.load(fh)
        return None

    def put(self, query, payload):
        tmp = self._path(query) + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, ensure_ascii=False)
        os.replace(tmp, self._path(query))


OUTGOING_QUERY = """\
SELECT DISTINCT ?p ?pLabel ?o ?oLabel WHERE {{
  wd:{entity} ?prop ?o .
  ?p wikibase:directClaim ?prop .
  FILTER(isIRI(?o))
  SERVICE wikibase:label {{ bd:serviceParam wikibase:language "en". }}
}}
LIMIT {limit}
"""

INCOMING_QUERY = """\
SELECT DISTINCT ?p ?pLabel ?s ?sLabel WHERE {{
  ?s ?prop wd:{entity} .
  ?p wikibase:directClaim ?prop .
  SERVICE wikibase:label {{ bd:serviceParam wikibase:language "en". }}
}}
LIMIT {limit}
"""


class WikidataBackend:
    """Live Wikidata client: wbsearchentities for linking, SPARQL for edges."""

    def __init__(
        self,
        sparql_endpoint="https://query.wikidata.org/sparql",
        action_api="https://www.wikidata.org/w/api.php",
        cache_dir=None,
        timeout=10.0,
        user_agent="claimcheck/0.1",
    ):
        import requests

        self._requests = requests
        self.sparql_endpoint = sparql_endpoint
        self.action_api = action_api
        self.timeout = timeout
        self.cache = SparqlCache(cache_dir) if cache_dir else None
        self.headers = {"User-Agent": user_agent}

    def _get(self, url, params):
        last = None
        for attempt in range(2):
            try:
                resp = self._requests.get(
                    url, params=params, headers=self.headers, timeout=self.timeout
                )
            except self._requests.Timeout as exc:
                raise QueryTimeout(str(exc)) from exc
            except self._requests.RequestException as exc:
                last = TransportError(str(exc))
            else:
                if resp.status_code == 200:
                    return resp.json()
                last = TransportError(f"status {resp.status_code} from {url}")
            time.sleep(0.5 + random.random() * 0.5)
        raise last

    def search_entities(self, text, limit=5):
        payload = self._get(
            self.action_api,
            {
                "action": "wbsearchentities",
                "search": text,
                "language": "en",
                "format": "json",
                "limit": limit,
            },
        )
        return [
            EntityId(hit["id"], hit.get("label", ""))
            for hit in payload.get("search", [])
        ]

    def _sparql(self, query):
        if self.cache is not None:
            cached = self.cache.get(query)
            if cached is not None:
                return cached
        payload = self._get(self.sparql_endpoint, {"query": query, "format": "json"})
        if self.cache is not None:
            self.cache.put(query, payload)
        return payload

    def relations_of(self, entity_id, direction, limit=RELATION_FETCH_LIMIT):
        template = OUTGOING_QUERY if direction == "outgoing" else INCOMING_QUERY
        payload = self._sparql(template.format(entity=entity_id, limit=limit))
        grouped = {}
        neighbor_var = "o" if direction == "outgoing" else "s"
        for row in payload.get("results", {}).get("bindings", []):
            prop_uri = row["p"]["value"]
            rel_id = prop_uri.rsplit("/", 1)[-1]
            rel = RelationId(rel_id, row.get("pLabel", {}).get("value", rel_id))
            node = row.get(neighbor_var, {})
            node_id = node.get("value", "").rsplit("/", 1)[-1]
            if not node_id:
                continue
            label = row.get(neighbor_var + "Label", {}).get("value", node_id)
            grouped.setdefault(rel.id, (rel, []))[1].append(EntityId(node_id, label))
        return [grouped[rid] for rid in sorted(grouped)]


# ---------------------------------------------------------------------------
# Linking and expansion
# ---------------------------------------------------------------------------


def link_entities(mentions, backend) -> list:
    """Top backend hit per mention, deduplicated in first-occurrence order."""
    if not mentions:
        raise AllMentionsUnlinkable("no mentions to link")
    linked = []
    seen = set()
    for mention in mentions:
        hits = backend.search_entities(mention.surface)
        if not hits:
            continue
        top = hits[0]
        mention.candidate_ids = [h.id for h in hits]
        if top.id not in seen:
            seen.add(top.id)
            linked.append(top)
    if not linked:
        raise AllMentionsUnlinkable(
            f"none of {[m.surface for m in mentions]} linked to the graph"
        )
    return linked


def fetch_relations(entity, direction, backend, limit=MAX_OBJECTS_PER_RELATION):
    """All relation candidates of one entity in one direction, each carrying
    at most ``limit`` sample neighbors."""
    out = []
    for rel, neighbors in backend.relations_of(entity.id, direction):
        out.append(
            RelationCandidate(
                relation=rel,
                direction=direction,
                anchor=entity,
                sample_objects=neighbors[:limit],
            )
        )
    return out


def expand_entity(entity, backend, budget, limit=MAX_OBJECTS_PER_RELATION):
    """Both directional fetches of one entity; charges one expansion."""
    budget.charge_expansion()
    return fetch_relations(entity, "outgoing", backend, limit) + fetch_relations(
        entity, "incoming", backend, limit
    )


def _candidate_lines(candidates):
    return "\n".join(
        f"{i}. {c.anchor.label or c.anchor.id} --[{c.relation.label or c.relation.id}"
        f" ({c.direction})]--> "
        + ", ".join(o.label or o.id for o in c.sample_objects[:3])
        for i, c in enumerate(candidates)
    )


def prune_relations(claim, candidates, k, gateway, budget=None, template_id=RELATION_PRUNE, entity=None):
    """Keep the top min(k, n) candidates by one listwise LLM scoring call.

    Ties break by ascending (relation id, anchor id)."""
    if not candidates:
        raise ValueError("prune_relations requires a nonempty candidate list")
    bindings = {"claim": claim, "candidates": _candidate_lines(candidates)}
    if template_id == EXPANSION_PRUNE:
        bindings["entity"] = entity.label or entity.id if entity else ""
    payload = gateway.complete_structured(
        LlmRequest(template_id=template_id, bindings=bindings), _SCORES_SCHEMA
    )
    if budget is not None:
        budget.charge_llm()
    scores = payload["scores"]
    if not isinstance(scores, list) or len(scores) != len(candidates):
        raise ParseFailure(
            f"expected {len(candidates)} scores, got {scores!r}"
        )
    scored = []
    for cand, score in zip(candidates, scores):
        cand.score = float(score)
        scored.append(cand)
    scored.sort(key=lambda c: (-c.score, c.relation.id, c.anchor.id))
    return scored[: min(k, len(scored))]


def _claim_tokens(claim):
    return set(re.findall(r"[a-z0-9]+", claim.lower()))


def select_objects(candidate, claim, max_objects=MAX_OBJECTS_PER_RELATION):
    """Bound multi-valued fan-out: prefer neighbors sharing claim tokens,
    tie-break by ascending entity id."""
    tokens = _claim_tokens(claim)

    def overlap(entity):
        return len(tokens & set(re.findall(r"[a-z0-9]+", entity.label.lower())))

    ranked = sorted(candidate.sample_objects, key=lambda e: (-overlap(e), e.id))
    return ranked[:max_objects]


def expand_hop(subgraph, claim, budget, frontier, gateway, backend):
    """One beam-search hop over ``frontier``. Returns (subgraph, new_frontier).

    Expands at most k previously-unexpanded entities (claim-overlap preferred),
    prunes per entity and then per hop, and appends surviving triplets."""
    if not frontier:
        raise ValueError("expand_hop requires a nonempty frontier")
    tokens = _claim_tokens(claim)

    def priority(entity_id):
        label = subgraph.label_of(entity_id)
        shared = len(tokens & set(re.findall(r"[a-z0-9]+", label.lower())))
        return (-shared, entity_id)

    to_expand = sorted(
        (e for e in frontier if e not in subgraph.expanded), key=priority
    )[: budget.k]
    if not to_expand:
        return subgraph, set()

    survivors = []
    for entity_id in to_expand:
        entity = EntityId(entity_id, subgraph.label_of(entity_id))
        candidates = expand_entity(entity, backend, budget)
        subgraph.expanded.add(entity_id)
        if candidates:
            survivors.extend(
                prune_relations(
                    claim, candidates, budget.k, gateway, budget,
                    template_id=EXPANSION_PRUNE, entity=entity,
                )
            )

    retained = []
    if survivors:
        retained = prune_relations(claim, survivors, budget.k, gateway, budget)

    new_frontier = set()
    for cand in retained:
        anchor_hop = subgraph.hop_of.get(cand.anchor.id, 0)
        for neighbor in select_objects(cand, claim):
            if cand.direction == "outgoing":
                triplet = Triplet(cand.anchor, cand.relation, neighbor)
            else:
                triplet = Triplet(neighbor, cand.relation, cand.anchor)
            is_new_entity = neighbor.id not in subgraph.hop_of
            subgraph.register_entity(neighbor, anchor_hop + 1)
            subgraph.add_triplet(triplet)
            if is_new_entity:
                new_frontier.add(neighbor.id)
    subgraph.frontier = new_frontier
    return subgraph, new_frontier


def init_kg_retrieval(claim, k, n_init, budget, gateway, backend):
    """extract -> link -> n_init expansion rounds; the episode's observation o0.

    An unlinkable claim yields an empty subgraph (the agent's web-search
    fallback handles it) instead of an error."""
    if not claim or not claim.strip():
        raise EmptyClaim("claim is empty")
    subgraph = KnowledgeSubgraph()
    try:
        mentions = extract_mentions(claim)
        topics = link_entities(mentions, backend)
    except AllMentionsUnlinkable:
        return subgraph
    for topic in topics:
        subgraph.add_topic_entity(topic)
    for _ in range(n_init):
        if not subgraph.frontier:
            break
        expand_hop(subgraph, claim, budget, subgraph.frontier, gateway, backend)
        subgraph.hops_done += 1
    return subgraph


def expand_kg(claim, subgraph, budget, gateway, backend):
    """One more hop over the current frontier; errors once N hops are spent."""
    if subgraph.hops_done >= budget.n_hops:
        raise BudgetExhausted(f"hop budget N={budget.n_hops} exhausted")
    if not subgraph.frontier or all(e in subgraph.expanded for e in subgraph.frontier):
        return subgraph
    expand_hop(subgraph, claim, budget, subgraph.frontier, gateway, backend)
    subgraph.hops_done += 1
    return subgraph
