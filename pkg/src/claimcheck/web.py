"""Open-web evidence: search, BM25 coarse ranking, LLM fine filtering, and
fusion of surviving evidence into the knowledge subgraph.

KG-origin facts are anchors: fusion only ever adds web triplets or entity
annotations, never removes or edits existing graph content.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field

from .errors import AllItemsFailed, ParseFailure, ProviderQuotaExceeded, TransportError
from .graph import (
    EntityId,
    KnowledgeSubgraph,
    RelationId,
    Triplet,
    normalize_relation_label,
)
from .llm import LlmRequest, ResponseSchema
from .policy import EVIDENCE_FILTER, TRIPLET_EXTRACT, WEB_QUERY

log = logging.getLogger(__name__)

MAX_QUERY_CHARS = 256
MAX_PASSAGE_CHARS = 1200
FILTER_BATCH_SIZE = 8
DEFAULT_CONSISTENCY_THRESHOLD = 0.5
BM25_K1 = 1.2
BM25_B = 0.75


@dataclass
class WebQuery:
    text: str
    rationale: str = ""

    def __post_init__(self):
        self.text = self.text.strip()[:MAX_QUERY_CHARS]
        if not self.text:
            raise ValueError("web query text must be nonempty")


@dataclass
class WebDocument:
    url: str
    title: str
    snippet: str
    provider_rank: int


@dataclass
class Passage:
    text: str
    source_url: str
    index: int = 0
    bm25: float = 0.0


@dataclass
class FilteredEvidence:
    passage: Passage
    consistency_confidence: float
    stance: str  # supports | refutes | neutral


@dataclass
class WebTriplet:
    triplet: Triplet
    provenance: str
    confidence: float
    schema_aligned: bool = False


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------


class FixtureSearchProvider:
    """Canned results: JSON mapping query text -> [{url,title,snippet}]."""

    def __init__(self, data=None, path=None):
        if data is None:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        self.data = data

    def search(self, query_text, m):
        rows = self.data.get(query_text, [])
        return [
            WebDocument(
                url=row["url"],
                title=row.get("title", ""),
                snippet=row.get("snippet", ""),
                provider_rank=i + 1,
            )
            for i, row in enumerate(rows[:m])
        ]


class SerperProvider:
    """Serper-compatible JSON search API client."""

    def __init__(self, endpoint="https://google.serper.dev/search",
                 api_key_env="SERPER_API_KEY", timeout=15.0):
        import os

        import requests

        self._requests = requests
        self.endpoint = endpoint
        self.api_key = os.environ.get(api_key_env, "")
        self.timeout = timeout

    def search(self, query_text, m):
        try:
            resp = self._requests.post(
                self.endpoint,
                json={"q": query_text, "num": m},
                headers={"X-API-KEY": self.api_key, "Content-Type": "application/json"},
                timeout=self.timeout,
            )
        except self._requests.RequestException as exc:
            raise TransportError(f"web search failed: {exc}") from exc
        if resp.status_code == 429:
            raise ProviderQuotaExceeded("search provider quota exceeded (429)")
        if resp.status_code != 200:
            raise TransportError(f"search provider returned status {resp.status_code}")
        rows = resp.json().get("organic", [])[:m]
        return [
            WebDocument(
                url=row.get("link", ""),
                title=row.get("title", ""),
                snippet=row.get("snippet", ""),
                provider_rank=i + 1,
            )
            for i, row in enumerate(rows)
        ]


def search(query: WebQuery, m, provider):
    if m < 1:
        raise ValueError("m must be >= 1")
    docs = provider.search(query.text, m)
    docs.sort(key=lambda d: d.provider_rank)
    return docs[:m]


# ---------------------------------------------------------------------------
# Query formulation
# ---------------------------------------------------------------------------

_QUERY_SCHEMA = ResponseSchema(required=("query",))


def formulate_query(claim, subgraph: KnowledgeSubgraph, gateway) -> WebQuery:
    """One LLM call targeting the evidence gap; with no evidence at all the
    claim itself is the query (no LLM call)."""
    if subgraph.is_empty():
        return WebQuery(text=claim[:MAX_QUERY_CHARS], rationale="no evidence retrieved yet")
    evidence = "\n".join(text for _, text in subgraph.evidence_lines())
    payload = gateway.complete_structured(
        LlmRequest(template_id=WEB_QUERY, bindings={"claim": claim, "evidence": evidence}),
        _QUERY_SCHEMA,
    )
    return WebQuery(text=str(payload["query"]), rationale=str(payload.get("rationale", "")))


# ---------------------------------------------------------------------------
# BM25 coarse ranking
# ---------------------------------------------------------------------------


def tokenize(text):
    return re.findall(r"[a-z0-9]+", text.lower())


def bm25_scores(query_tokens, docs_tokens, k1=BM25_K1, b=BM25_B):
    """Okapi BM25 with idf = ln(1 + (N - df + 0.5)/(df + 0.5))."""
    n = len(docs_tokens)
    if n == 0:
        return []
    avgdl = sum(len(d) for d in docs_tokens) / n
    freqs = [Counter(d) for d in docs_tokens]
    df = Counter()
    for tf in freqs:
        for term in tf:
            df[term] += 1
    idf = {t: math.log(1.0 + (n - c + 0.5) / (c + 0.5)) for t, c in df.items()}
    scores = []
    for tf, doc in zip(freqs, docs_tokens):
        dl = len(doc)
        norm = k1 * (1.0 - b + b * (dl / avgdl if avgdl else 0.0))
        s = 0.0
        for term in query_tokens:
            f = tf.get(term, 0)
            if f:
                s += idf[term] * f * (k1 + 1.0) / (f + norm)
        scores.append(s)
    return scores


def rank_passages(query: WebQuery, documents) -> list:
    """Snippet-level passages scored by BM25 against the query; descending
    score, ties by (url, passage index)."""
    if not documents:
        raise ValueError("rank_passages requires a nonempty document list")
    passages = []
    for doc in documents:
        text = " ".join(doc.snippet.split())[:MAX_PASSAGE_CHARS]
        if text:
            passages.append(Passage(text=text, source_url=doc.url, index=len(passages)))
    if not passages:
        return []
    scores = bm25_scores(tokenize(query.text), [tokenize(p.text) for p in passages])
    for passage, score in zip(passages, scores):
        passage.bm25 = score
    passages.sort(key=lambda p: (-p.bm25, p.source_url, p.index))
    return passages


# ---------------------------------------------------------------------------
# Fine-grained filtering
# ---------------------------------------------------------------------------

_FILTER_SCHEMA = ResponseSchema(required=("judgments",))
_STANCES = {"supports", "refutes", "neutral"}


def filter_evidence(claim, passages, gateway, threshold=DEFAULT_CONSISTENCY_THRESHOLD):
    """One batched LLM call per <=8 passages; keeps entries whose consistency
    confidence clears the threshold."""
    if not passages:
        raise ValueError("filter_evidence requires a nonempty passage list")
    retained = []
    for start in range(0, len(passages), FILTER_BATCH_SIZE):
        batch = passages[start : start + FILTER_BATCH_SIZE]
        listing = "\n".join(f"{i}. {p.text}" for i, p in enumerate(batch))
        payload = gateway.complete_structured(
            LlmRequest(
                template_id=EVIDENCE_FILTER,
                bindings={"claim": claim, "passages": listing},
            ),
            _FILTER_SCHEMA,
        )
        for row in payload["judgments"]:
            try:
                idx = int(row["index"])
                confidence = float(row["confidence"])
            except (KeyError, TypeError, ValueError):
                continue
            if not 0 <= idx < len(batch):
                continue
            if confidence < 0.0 or confidence > 1.0:
                log.warning("clamping out-of-range consistency confidence %s", confidence)
                confidence = min(1.0, max(0.0, confidence))
            stance = row.get("stance", "neutral")
            if stance not in _STANCES:
                stance = "neutral"
            if confidence >= threshold:
                retained.append(
                    FilteredEvidence(
                        passage=batch[idx],
                        consistency_confidence=confidence,
                        stance=stance,
                    )
                )
    return retained


# ---------------------------------------------------------------------------
# Triplet conversion
# ---------------------------------------------------------------------------

_EXTRACT_SCHEMA = ResponseSchema(required=("subject", "relation", "object"))


def synthetic_entity(surface: str) -> EntityId:
    digest = hashlib.sha256(surface.casefold().encode("utf-8")).hexdigest()[:12]
    return EntityId(id=f"W:{digest}", label=surface)


def synthetic_relation(label: str) -> RelationId:
    digest = hashlib.sha256(label.casefold().encode("utf-8")).hexdigest()[:12]
    return RelationId(id=f"WR:{digest}", label=label)


def _link_surface(surface, kg_backend):
    if kg_backend is not None:
        hits = kg_backend.search_entities(surface)
        if hits:
            return hits[0]
    return synthetic_entity(surface)


def to_triplets(evidence, claim, gateway, kg_backend=None) -> list:
    """Structured extraction per evidence item; items whose extraction fails
    are skipped, and only a total wipe-out is an error."""
    if not evidence:
        raise ValueError("to_triplets requires nonempty evidence")
    out = []
    for item in evidence:
        try:
            payload = gateway.complete_structured(
                LlmRequest(
                    template_id=TRIPLET_EXTRACT,
                    bindings={"claim": claim, "passage": item.passage.text},
                ),
                _EXTRACT_SCHEMA,
            )
        except ParseFailure:
            continue
        subject = _link_surface(str(payload["subject"]), kg_backend)
        obj = _link_surface(str(payload["object"]), kg_backend)
        relation = synthetic_relation(str(payload["relation"]))
        out.append(
            WebTriplet(
                triplet=Triplet(
                    subject, relation, obj,
                    origin="web", confidence=item.consistency_confidence,
                ),
                provenance=item.passage.source_url,
                confidence=item.consistency_confidence,
            )
        )
    if not out:
        raise AllItemsFailed("no evidence item produced a triplet")
    return out


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------


def integrate(subgraph: KnowledgeSubgraph, web_triplets, evidence=()) -> KnowledgeSubgraph:
    """Pure fusion: returns a new subgraph with web facts merged in.

    Rules: exact duplicates are skipped; relations matching the KG schema (by
    id or normalized label) are added as schema-aligned triplets; facts about
    known entities with unmatched relations become entity annotations; facts
    about entirely new entities are added as web-origin triplets. KG-origin
    triplets are never touched.
    """
    result = subgraph.copy()
    label_map = result.kg_relation_labels()
    kg_relation_ids = {t.relation.id for t in result.triplets.values() if t.origin == "kg"}
    # notes dedupe globally: re-merging must not re-annotate a fact onto a
    # different entity once more endpoints have become known
    known_notes = {note for notes in result.annotations.values() for note in notes}

    for wt in web_triplets:
        t = wt.triplet
        aligned = None
        if t.relation.id in kg_relation_ids:
            aligned = t.relation
        else:
            aligned = label_map.get(normalize_relation_label(t.relation.label))

        if aligned is not None:
            candidate = Triplet(
                t.subject, aligned, t.object, origin="web", confidence=wt.confidence
            )
            if candidate.key in result.triplets:
                continue  # already known, KG version wins
            wt.schema_aligned = True
            result.add_triplet(candidate)
        elif t.key in result.triplets:
            continue  # already merged on a previous pass
        elif t.subject.id in result.hop_of or t.object.id in result.hop_of:
            target = t.subject.id if t.subject.id in result.hop_of else t.object.id
            note = f"{t.as_text()} [{wt.provenance}]"
            if note not in known_notes:
                known_notes.add(note)
                result.add_annotation(target, note)
        else:
            if t.key in result.triplets:
                continue
            result.add_triplet(
                Triplet(t.subject, t.relation, t.object, origin="web", confidence=wt.confidence)
            )

    # passages that mention known entities enrich them as annotations
    for item in evidence:
        text = item.passage.text
        lowered = text.lower()
        for entity_id in sorted(result.hop_of):
            label = result.label_of(entity_id)
            if len(label) > 3 and label.lower() in lowered:
                note = f"{text[:300]} [{item.passage.source_url}]"
                result.add_annotation(entity_id, note)
    return result
