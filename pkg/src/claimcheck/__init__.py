"""Agentic claim verification over knowledge-graph and web evidence."""

from .agent import (
    Action,
    EpisodeConfig,
    EpisodeRunner,
    Observation,
    Trajectory,
    VerdictResult,
    run_episode,
)
from .graph import EntityId, KnowledgeSubgraph, RelationId, Triplet
from .llm import LlmGateway, PromptTemplate, ScriptedBackend
from .policy import PromptPolicy, default_policy

__version__ = "0.1.0"

__all__ = [
    "Action",
    "EntityId",
    "EpisodeConfig",
    "EpisodeRunner",
    "KnowledgeSubgraph",
    "LlmGateway",
    "Observation",
    "PromptPolicy",
    "PromptTemplate",
    "RelationId",
    "ScriptedBackend",
    "Trajectory",
    "Triplet",
    "VerdictResult",
    "default_policy",
    "run_episode",
]
